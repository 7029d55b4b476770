//! Toy-scale general algorithm: a one-hidden-layer ReLU representation
//! with per-client linear heads, softmax cross-entropy with the
//! collapse-structure head penalty, client sampling, representation
//! averaging, and a server-side head step on the summed penalty.

use crate::error::{CoreError, Result};
use crate::rng::{purpose, seeded_gaussian, RngStream};
use crate::synth::ClassShard;
use crate::{Matrix, Vector};
use rayon::prelude::*;

/// Shared representation (`V1`, `c1`) and per-client heads (`H_i`, `b_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralModel {
    /// `k x dim` hidden-layer weights.
    pub rep_weights: Matrix,
    /// Hidden-layer bias, length `k`.
    pub rep_bias: Vector,
    /// Per-client `k x m` head matrices.
    pub heads: Vec<Matrix>,
    /// Per-client logit biases, length `m`.
    pub biases: Vec<Vector>,
}

impl GeneralModel {
    pub fn hidden(&self) -> usize {
        self.rep_weights.nrows()
    }

    pub fn clients(&self) -> usize {
        self.heads.len()
    }

    /// Hidden features `ReLU(V1 x + c1)` for one input.
    pub fn features(&self, x: &Vector) -> Vector {
        (&self.rep_weights * x + &self.rep_bias).map(|v| v.max(0.0))
    }
}

#[derive(Debug, Clone)]
pub struct GeneralConfig {
    /// Hidden width (feature dimension of the representation).
    pub hidden: usize,
    /// Total class count `m`.
    pub classes: usize,
    /// Classes owned per client `m'` (used by the local collapse metric).
    pub classes_per_client: usize,
    /// Feature-norm penalty weight.
    pub lambda1: f64,
    /// Head Frobenius penalty weight.
    pub lambda2: f64,
    /// Collapse-structure penalty weight.
    pub lambda3: f64,
    /// Local full-batch steps per round.
    pub local_epochs: usize,
    /// Fraction of clients sampled each round, in (0, 1].
    pub sample_ratio: f64,
    pub eta_l: f64,
    pub eta_r: f64,
    pub rounds: usize,
    pub record_stride: usize,
    /// Average the representation by the realized batch size instead of
    /// the nominal `r * M`.
    pub average_by_realized: bool,
    pub seed: u64,
}

impl GeneralConfig {
    pub fn defaults(hidden: usize, classes: usize, classes_per_client: usize, seed: u64) -> Self {
        Self {
            hidden,
            classes,
            classes_per_client,
            lambda1: 1e-3,
            lambda2: 1e-3,
            lambda3: 1e-2,
            local_epochs: 2,
            sample_ratio: 1.0,
            eta_l: 0.1,
            eta_r: 0.1,
            rounds: 100,
            record_stride: 1,
            average_by_realized: false,
            seed,
        }
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(CoreError::InvalidParameter {
                name: "sample_ratio",
                reason: format!("must lie in (0, 1], got {}", self.sample_ratio),
            });
        }
        if (self.sample_ratio * clients as f64).ceil() < 1.0 {
            return Err(CoreError::InvalidParameter {
                name: "sample_ratio",
                reason: "samples no client".into(),
            });
        }
        for (name, v) in [("eta_l", self.eta_l), ("eta_r", self.eta_r)] {
            if !(v >= 0.0) {
                return Err(CoreError::InvalidParameter {
                    name,
                    reason: format!("must be nonnegative, got {v}"),
                });
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if v < 0.0 {
                return Err(CoreError::InvalidParameter {
                    name,
                    reason: format!("must be nonnegative, got {v}"),
                });
            }
        }
        if self.rounds < 1 || self.local_epochs < 1 || self.record_stride < 1 {
            return Err(CoreError::InvalidParameter {
                name: "rounds",
                reason: "rounds, local_epochs and record_stride must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Per-round trace entry for the general algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralRecord {
    pub round: usize,
    /// Clients sampled this round, ascending; empty at `round = 0`.
    pub sampled: Vec<usize>,
    /// Mean per-client training accuracy over all clients.
    pub accuracy: f64,
    pub global_nc2: f64,
    /// NaN when `m' < 2` (scale undefined).
    pub local_nc2: f64,
}

/// Collapse-structure target `(1/sqrt(s-1)) u u^T ⊙ (I_m - (1/s) 1 1^T)`.
fn nc_target(u: &Vector, s: usize) -> Matrix {
    let m = u.len();
    let scale = 1.0 / ((s as f64 - 1.0).sqrt());
    let inv_s = 1.0 / s as f64;
    Matrix::from_fn(m, m, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        scale * u[i] * u[j] * (id - inv_s)
    })
}

fn check_nc_inputs(h: &Matrix, u: &Vector, s: usize) -> Result<f64> {
    if s < 2 {
        return Err(CoreError::InvalidParameter {
            name: "class_count_for_scale",
            reason: format!("needs at least 2 classes, got {s}"),
        });
    }
    if u.iter().all(|&v| v == 0.0) {
        return Err(CoreError::InvalidParameter {
            name: "indicator",
            reason: "all-zero class indicator".into(),
        });
    }
    let gram_norm = (h.transpose() * h).norm();
    if gram_norm <= 0.0 {
        return Err(CoreError::ZeroHead);
    }
    Ok(gram_norm)
}

/// Distance of the normalized head Gram from the collapse-structure
/// target: `|| H^T H / ||H^T H||_F - target(u, s) ||_F`.
pub fn nc_penalty(h: &Matrix, u: &Vector, s: usize) -> Result<f64> {
    let gram_norm = check_nc_inputs(h, u, s)?;
    let gram = h.transpose() * h;
    Ok((gram / gram_norm - nc_target(u, s)).norm())
}

/// Exact gradient of [`nc_penalty`] with respect to `H`, by the chain rule
/// through the Frobenius normalization; 0 at a zero-penalty point.
pub fn nc_gradient(h: &Matrix, u: &Vector, s: usize) -> Result<Matrix> {
    let g_norm = check_nc_inputs(h, u, s)?;
    let gram = h.transpose() * h;
    let diff = &gram / g_norm - nc_target(u, s);
    let p = diff.norm();
    // At (numerically) zero penalty the norm is not differentiable; take
    // the zero subgradient instead of a noise-direction unit vector.
    if p <= 1e-12 {
        return Ok(Matrix::zeros(h.nrows(), h.ncols()));
    }
    // d penalty / d Gram = diff/(p g) - (<diff, Gram>/(p g^3)) Gram, which
    // is symmetric, so d/dH = 2 H * that.
    let inner = diff.dot(&gram);
    let d_gram = &diff / (p * g_norm) - (inner / (p * g_norm.powi(3))) * &gram;
    Ok(2.0 * h * d_gram)
}

/// One full-batch gradient step for one client at rate `eta_l`, updating
/// the representation view and the client's head simultaneously. Returns
/// the updated `(V1, c1, H_i, b_i)` and the pre-step loss.
#[allow(clippy::type_complexity)]
pub fn local_train_step(
    v1: &Matrix,
    c1: &Vector,
    head: &Matrix,
    bias: &Vector,
    shard: &ClassShard,
    cfg: &GeneralConfig,
) -> Result<(Matrix, Vector, Matrix, Vector, f64)> {
    let (grads, loss) = local_gradients(v1, c1, head, bias, shard, cfg)?;
    Ok((
        v1 - cfg.eta_l * grads.v1,
        c1 - cfg.eta_l * grads.c1,
        head - cfg.eta_l * grads.head,
        bias - cfg.eta_l * grads.bias,
        loss,
    ))
}

struct LocalGrads {
    v1: Matrix,
    c1: Vector,
    head: Matrix,
    bias: Vector,
}

/// Total local loss: mean softmax cross-entropy plus
/// `lambda1 * mean ||features||^2 + lambda2 ||H||_F^2 +
/// lambda3 * nc_penalty(H, u, m)`.
pub fn local_loss(
    v1: &Matrix,
    c1: &Vector,
    head: &Matrix,
    bias: &Vector,
    shard: &ClassShard,
    cfg: &GeneralConfig,
) -> Result<f64> {
    let n = shard.features.nrows();
    let mut ce = 0.0;
    let mut feat_sq = 0.0;
    for r in 0..n {
        let x = shard.features.row(r).transpose();
        let a = (v1 * &x + c1).map(|v| v.max(0.0));
        let logits = head.transpose() * &a + bias;
        let max_l = logits.max();
        let log_sum = logits.iter().map(|l| (l - max_l).exp()).sum::<f64>().ln() + max_l;
        ce += log_sum - logits[shard.labels[r]];
        feat_sq += a.norm_squared();
    }
    let nf = n as f64;
    let mut loss = ce / nf + cfg.lambda1 * feat_sq / nf + cfg.lambda2 * head.norm_squared();
    if cfg.lambda3 > 0.0 {
        loss += cfg.lambda3 * nc_penalty(head, &shard.indicator, cfg.classes)?;
    }
    Ok(loss)
}

fn local_gradients(
    v1: &Matrix,
    c1: &Vector,
    head: &Matrix,
    bias: &Vector,
    shard: &ClassShard,
    cfg: &GeneralConfig,
) -> Result<(LocalGrads, f64)> {
    let n = shard.features.nrows();
    let k = v1.nrows();
    let m = head.ncols();
    let nf = n as f64;
    let mut g_v1 = Matrix::zeros(k, v1.ncols());
    let mut g_c1 = Vector::zeros(k);
    let mut g_head = Matrix::zeros(k, m);
    let mut g_bias = Vector::zeros(m);
    let mut ce = 0.0;
    let mut feat_sq = 0.0;
    for r in 0..n {
        let x = shard.features.row(r).transpose();
        let z = v1 * &x + c1;
        let a = z.map(|v| v.max(0.0));
        let logits = head.transpose() * &a + bias;
        let max_l = logits.max();
        let exps = logits.map(|l| (l - max_l).exp());
        let sum: f64 = exps.sum();
        let probs = exps / sum;
        let y = shard.labels[r];
        ce += sum.ln() + max_l - logits[y];
        feat_sq += a.norm_squared();
        let mut d_logits = probs / nf;
        d_logits[y] -= 1.0 / nf;
        g_head += &a * d_logits.transpose();
        g_bias += &d_logits;
        let mut d_a = head * &d_logits + (2.0 * cfg.lambda1 / nf) * &a;
        for i in 0..k {
            if z[i] <= 0.0 {
                d_a[i] = 0.0;
            }
        }
        g_v1 += &d_a * x.transpose();
        g_c1 += &d_a;
    }
    let mut loss = ce / nf + cfg.lambda1 * feat_sq / nf + cfg.lambda2 * head.norm_squared();
    g_head += 2.0 * cfg.lambda2 * head;
    if cfg.lambda3 > 0.0 {
        loss += cfg.lambda3 * nc_penalty(head, &shard.indicator, cfg.classes)?;
        g_head += cfg.lambda3 * nc_gradient(head, &shard.indicator, cfg.classes)?;
    }
    Ok((
        LocalGrads {
            v1: g_v1,
            c1: g_c1,
            head: g_head,
            bias: g_bias,
        },
        loss,
    ))
}

/// Mean collapse metrics over clients: `global_nc2` with the full class
/// count, `local_nc2` with the per-client class count (NaN when the latter
/// is below 2).
pub fn nc2_metrics(
    heads: &[Matrix],
    indicators: &[Vector],
    m: usize,
    m_prime: usize,
) -> Result<(f64, f64)> {
    assert_eq!(heads.len(), indicators.len());
    let mf = heads.len() as f64;
    let mut global = 0.0;
    for (h, u) in heads.iter().zip(indicators) {
        global += nc_penalty(h, u, m)?;
    }
    let local = if m_prime >= 2 {
        let mut acc = 0.0;
        for (h, u) in heads.iter().zip(indicators) {
            acc += nc_penalty(h, u, m_prime)?;
        }
        acc / mf
    } else {
        f64::NAN
    };
    Ok((global / mf, local))
}

fn init_general(cfg: &GeneralConfig, dim: usize, clients: usize) -> GeneralModel {
    let w_std = 1.0 / (dim as f64).sqrt();
    let h_std = 1.0 / (cfg.hidden as f64).sqrt();
    let rep_weights = seeded_gaussian(
        cfg.hidden,
        dim,
        w_std,
        RngStream::new(cfg.seed, purpose::INIT_REP),
    );
    let heads: Vec<Matrix> = (0..clients)
        .map(|i| {
            seeded_gaussian(
                cfg.hidden,
                cfg.classes,
                h_std,
                RngStream::new(cfg.seed, purpose::INIT_HEADS + 1 + i as u64),
            )
        })
        .collect();
    GeneralModel {
        rep_weights,
        rep_bias: Vector::zeros(cfg.hidden),
        heads,
        biases: vec![Vector::zeros(cfg.classes); clients],
    }
}

fn sample_clients(cfg: &GeneralConfig, clients: usize, round: usize) -> Vec<usize> {
    let count = ((cfg.sample_ratio * clients as f64).ceil() as usize)
        .max(1)
        .min(clients);
    let mut rng = RngStream::new(cfg.seed, purpose::CLIENT_SAMPLING + round as u64).rng();
    let mut chosen = rand::seq::index::sample(&mut rng, clients, count).into_vec();
    chosen.sort_unstable();
    chosen
}

fn mean_accuracy(model: &GeneralModel, shards: &[ClassShard]) -> f64 {
    let accs: Vec<f64> = shards
        .par_iter()
        .map(|shard| {
            let head = &model.heads[shard.index];
            let bias = &model.biases[shard.index];
            let n = shard.features.nrows();
            let mut correct = 0usize;
            for r in 0..n {
                let x = shard.features.row(r).transpose();
                let logits = head.transpose() * model.features(&x) + bias;
                let pred = logits.argmax().0;
                if pred == shard.labels[r] {
                    correct += 1;
                }
            }
            correct as f64 / n as f64
        })
        .collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

fn record_round(
    model: &GeneralModel,
    shards: &[ClassShard],
    cfg: &GeneralConfig,
    round: usize,
    sampled: Vec<usize>,
) -> Result<GeneralRecord> {
    let indicators: Vec<Vector> = shards.iter().map(|s| s.indicator.clone()).collect();
    let (global_nc2, local_nc2) = nc2_metrics(
        &model.heads,
        &indicators,
        cfg.classes,
        cfg.classes_per_client,
    )?;
    Ok(GeneralRecord {
        round,
        sampled,
        accuracy: mean_accuracy(model, shards),
        global_nc2,
        local_nc2,
    })
}

/// Run the general algorithm. Per round: sample `ceil(r M)` clients
/// without replacement, run `local_epochs` full-batch steps per sampled
/// client in parallel, average the representation over sampled clients
/// (weight `1/(r M)`, or the realized batch size when configured), and
/// take one server step at `eta_r` on the summed collapse penalty of the
/// sampled heads. Unsampled clients keep their heads.
pub fn general_flute_train(
    cfg: &GeneralConfig,
    shards: &[ClassShard],
) -> Result<(GeneralModel, Vec<GeneralRecord>)> {
    let clients = shards.len();
    if clients == 0 {
        return Err(CoreError::InvalidParameter {
            name: "shards",
            reason: "nonempty shard list required".into(),
        });
    }
    cfg.validate(clients)?;
    let dim = shards[0].features.ncols();
    let mut model = init_general(cfg, dim, clients);
    let mut trace = vec![record_round(&model, shards, cfg, 0, Vec::new())?];
    for t in 1..=cfg.rounds {
        let sampled = sample_clients(cfg, clients, t);
        let weight = if cfg.average_by_realized {
            1.0 / sampled.len() as f64
        } else {
            1.0 / (cfg.sample_ratio * clients as f64)
        };
        let locals: Vec<(Matrix, Vector, Matrix, Vector)> = sampled
            .par_iter()
            .map(|&i| {
                let mut v1 = model.rep_weights.clone();
                let mut c1 = model.rep_bias.clone();
                let mut head = model.heads[i].clone();
                let mut bias = model.biases[i].clone();
                for _ in 0..cfg.local_epochs {
                    let (v1n, c1n, hn, bn, _) =
                        local_train_step(&v1, &c1, &head, &bias, &shards[i], cfg)?;
                    v1 = v1n;
                    c1 = c1n;
                    head = hn;
                    bias = bn;
                }
                Ok((v1, c1, head, bias))
            })
            .collect::<Result<_>>()?;
        let mut v1_sum = Matrix::zeros(cfg.hidden, dim);
        let mut c1_sum = Vector::zeros(cfg.hidden);
        for (v1, c1, _, _) in &locals {
            v1_sum += v1;
            c1_sum += c1;
        }
        model.rep_weights = weight * v1_sum;
        model.rep_bias = weight * c1_sum;
        for (&i, (_, _, head, bias)) in sampled.iter().zip(&locals) {
            let stepped = head - cfg.eta_r * nc_gradient(head, &shards[i].indicator, cfg.classes)?;
            model.heads[i] = stepped;
            model.biases[i] = bias.clone();
        }
        if t % cfg.record_stride == 0 || t == cfg.rounds {
            trace.push(record_round(&model, shards, cfg, t, sampled)?);
        }
    }
    Ok((model, trace))
}
