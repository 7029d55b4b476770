//! The FLUTE linear algorithm: random initialization, client gradients,
//! fixed-order server aggregation, and the server-side balancing penalty
//! step, in empirical and population (oracle-gradient) modes.

use crate::error::{CoreError, Result};
use crate::metrics::{self, RoundRecord};
use crate::rng::{purpose, seeded_gaussian, RngStream};
use crate::synth::{ClientShard, GroundTruth};
use crate::theory;
use crate::{Matrix, Vector};
use rayon::prelude::*;

/// The factored model: shared representation `B` (d x k) and stacked heads
/// `W` (k x M, column `i` is client `i`'s head).
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredModel {
    pub b: Matrix,
    pub w: Matrix,
}

impl FactoredModel {
    pub fn d(&self) -> usize {
        self.b.nrows()
    }

    pub fn k(&self) -> usize {
        self.b.ncols()
    }

    pub fn clients(&self) -> usize {
        self.w.ncols()
    }

    /// The stacked predictor `B W`.
    pub fn product(&self) -> Matrix {
        &self.b * &self.w
    }
}

/// Whether client gradients come from finite local datasets or from the
/// exact population limit (`X^T X / N` replaced by the identity, noise
/// removed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Empirical,
    Population,
}

/// Hyperparameters for the linear algorithm.
#[derive(Debug, Clone)]
pub struct FluteConfig {
    pub eta_l: f64,
    pub eta_r: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub alpha: f64,
    pub rounds: usize,
    pub record_stride: usize,
    pub mode: GradientMode,
    pub seed: u64,
}

impl FluteConfig {
    /// Defaults from the convergence analysis: `gamma1 = 1/4`,
    /// `gamma2 = 1/8`, `eta = 0.03`, `alpha = 1/(10 d)`.
    pub fn defaults(d: usize, rounds: usize, seed: u64) -> Self {
        Self {
            eta_l: 0.03,
            eta_r: 0.03,
            gamma1: 0.25,
            gamma2: 0.125,
            alpha: 1.0 / (10.0 * d as f64),
            rounds,
            record_stride: 1,
            mode: GradientMode::Empirical,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| -> Result<()> {
            if !(v > 0.0) {
                return Err(CoreError::InvalidParameter {
                    name,
                    reason: format!("must be positive, got {v}"),
                });
            }
            Ok(())
        };
        positive("eta_l", self.eta_l)?;
        positive("eta_r", self.eta_r)?;
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("alpha", self.alpha),
        ] {
            if v < 0.0 {
                return Err(CoreError::InvalidParameter {
                    name,
                    reason: format!("must be nonnegative, got {v}"),
                });
            }
        }
        if self.rounds < 1 {
            return Err(CoreError::InvalidParameter {
                name: "rounds",
                reason: "must be at least 1".into(),
            });
        }
        if self.record_stride < 1 {
            return Err(CoreError::InvalidParameter {
                name: "record_stride",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Initialize `B` and `W` with IID `Normal(0, alpha^2)` entries from
/// distinct streams.
pub fn init_factored(d: usize, k: usize, clients: usize, alpha: f64, seed: u64) -> FactoredModel {
    let b = seeded_gaussian(d, k, alpha, RngStream::new(seed, purpose::INIT_REP));
    let w = seeded_gaussian(k, clients, alpha, RngStream::new(seed, purpose::INIT_HEADS));
    FactoredModel { b, w }
}

/// Client `i`'s half-gradients of its local loss
/// `L_i = (1/N) sum ||x^T B w_i - y||^2`:
/// `G_B = (1/N) X^T (X B w_i - y) w_i^T` and
/// `g_w = (1/N) B^T X^T (X B w_i - y)`.
pub fn local_gradients(b: &Matrix, w_i: &Vector, shard: &ClientShard) -> (Matrix, Vector) {
    let n = shard.samples() as f64;
    let residual = &shard.x * (b * w_i) - &shard.y;
    let xt_r = shard.x.transpose() * residual / n;
    let g_b = &xt_r * w_i.transpose();
    let g_w = b.transpose() * xt_r;
    (g_b, g_w)
}

/// Population half-gradients: `G_B = (B W - Phi) W^T`,
/// `G_W = B^T (B W - Phi)`.
pub fn population_gradients(b: &Matrix, w: &Matrix, phi: &Matrix) -> (Matrix, Matrix) {
    let residual = b * w - phi;
    let g_b = &residual * w.transpose();
    let g_w = b.transpose() * residual;
    (g_b, g_w)
}

/// Aggregated data gradients for one round, as produced by the clients.
pub struct RoundGradients {
    /// Sum over clients of the representation gradients.
    pub g_b_total: Matrix,
    /// Head gradients stacked column-wise.
    pub g_w: Matrix,
}

/// Data step followed by the penalty step, with the penalty gradients
/// evaluated at the pre-round `(B, W)`:
/// `B+ = Bbar + 2 g1 eta_r B W W^T - 4 g2 eta_r B B^T B` and the
/// symmetric update for `W`.
pub fn server_step(
    model: &FactoredModel,
    grads: &RoundGradients,
    cfg: &FluteConfig,
) -> Result<FactoredModel> {
    if grads.g_b_total.shape() != model.b.shape() || grads.g_w.shape() != model.w.shape() {
        return Err(CoreError::ShapeMismatch {
            context: format!(
                "gradients {:?}/{:?} vs model {:?}/{:?}",
                grads.g_b_total.shape(),
                grads.g_w.shape(),
                model.b.shape(),
                model.w.shape()
            ),
        });
    }
    let b = &model.b;
    let w = &model.w;
    let b_bar = b - cfg.eta_l * &grads.g_b_total;
    let w_bar = w - cfg.eta_l * &grads.g_w;

    let bt_b = b.transpose() * b;
    let w_wt = w * w.transpose();
    let b_next =
        b_bar + 2.0 * cfg.gamma1 * cfg.eta_r * b * &w_wt - 4.0 * cfg.gamma2 * cfg.eta_r * b * &bt_b;
    let w_next = w_bar + 2.0 * cfg.gamma1 * cfg.eta_r * &bt_b * w
        - 4.0 * cfg.gamma2 * cfg.eta_r * &w_wt * w;
    Ok(FactoredModel {
        b: b_next,
        w: w_next,
    })
}

/// Evaluate all client gradients for the round. Clients run in parallel;
/// the reduction is a fixed-order sequential sum over ascending client
/// index, so the result does not depend on the thread count.
pub fn round_gradients(
    model: &FactoredModel,
    mode: GradientMode,
    phi: &Matrix,
    shards: Option<&[ClientShard]>,
) -> Result<RoundGradients> {
    match mode {
        GradientMode::Population => {
            let (g_b_total, g_w) = population_gradients(&model.b, &model.w, phi);
            Ok(RoundGradients { g_b_total, g_w })
        }
        GradientMode::Empirical => {
            let shards = shards.ok_or_else(|| CoreError::InvalidParameter {
                name: "shards",
                reason: "empirical mode requires client shards".into(),
            })?;
            let per_client: Vec<(Matrix, Vector)> = shards
                .par_iter()
                .map(|shard| local_gradients(&model.b, &model.w.column(shard.index).into_owned(), shard))
                .collect();
            let mut g_b_total = Matrix::zeros(model.d(), model.k());
            let mut g_w = Matrix::zeros(model.k(), model.clients());
            for (i, (g_b, g_wi)) in per_client.iter().enumerate() {
                g_b_total += g_b;
                g_w.set_column(i, g_wi);
            }
            Ok(RoundGradients { g_b_total, g_w })
        }
    }
}

/// The regularizer value `-gamma1 ||BW||_F^2 + gamma2 (||B^T B||_F^2 +
/// ||W W^T||_F^2)`.
pub fn regularizer_value(b: &Matrix, w: &Matrix, gamma1: f64, gamma2: f64) -> f64 {
    let bw = b * w;
    let bt_b = b.transpose() * b;
    let w_wt = w * w.transpose();
    -gamma1 * bw.norm_squared() + gamma2 * (bt_b.norm_squared() + w_wt.norm_squared())
}

/// Like [`flute_train`] but with an externally supplied initial model and
/// target rank, used by the oracle-equivalence diagnostics.
pub fn flute_train_from(
    cfg: &FluteConfig,
    gt: &GroundTruth,
    shards: Option<&[ClientShard]>,
    init: FactoredModel,
) -> Result<(FactoredModel, Vec<FactoredModel>)> {
    cfg.validate()?;
    let mut model = init;
    let mut iterates = vec![model.clone()];
    for _ in 1..=cfg.rounds {
        let grads = round_gradients(&model, cfg.mode, &gt.phi, shards)?;
        model = server_step(&model, &grads, cfg)?;
        iterates.push(model.clone());
    }
    Ok((model, iterates))
}

/// Run the linear algorithm for `cfg.rounds` rounds with target rank `k`.
/// Metrics are recorded at `t = 0`, every `record_stride` rounds, and at
/// the final round.
pub fn flute_train(
    cfg: &FluteConfig,
    gt: &GroundTruth,
    shards: Option<&[ClientShard]>,
    k: usize,
) -> Result<(FactoredModel, Vec<RoundRecord>)> {
    cfg.validate()?;
    if k < 1 {
        return Err(CoreError::InvalidParameter {
            name: "k",
            reason: "must be at least 1".into(),
        });
    }
    if cfg.mode == GradientMode::Empirical && shards.is_none() {
        return Err(CoreError::InvalidParameter {
            name: "shards",
            reason: "empirical mode requires client shards".into(),
        });
    }
    let mut model = init_factored(gt.d(), k, gt.clients(), cfg.alpha, cfg.seed);
    let mut trace = Vec::new();
    record(&mut trace, 0, &model, gt, k, cfg, shards)?;
    for t in 1..=cfg.rounds {
        let grads = round_gradients(&model, cfg.mode, &gt.phi, shards)?;
        model = server_step(&model, &grads, cfg)?;
        if t % cfg.record_stride == 0 || t == cfg.rounds {
            record(&mut trace, t, &model, gt, k, cfg, shards)?;
        }
    }
    Ok((model, trace))
}

fn record(
    trace: &mut Vec<RoundRecord>,
    t: usize,
    model: &FactoredModel,
    gt: &GroundTruth,
    k: usize,
    cfg: &FluteConfig,
    shards: Option<&[ClientShard]>,
) -> Result<()> {
    let mut rec = metrics::linear_metrics(model, gt, k.min(gt.d_under()))?;
    rec.round = t;
    theory::annotate_record(&mut rec, model, gt, k);
    if cfg.mode == GradientMode::Empirical {
        if let Some(shards) = shards {
            let disc = theory::gradient_discrepancy(model, gt, shards, cfg.eta_l);
            rec.q_norm = disc.q_norm;
            rec.q_tilde_norm = disc.q_tilde_norm;
        }
    }
    trace.push(rec);
    Ok(())
}
