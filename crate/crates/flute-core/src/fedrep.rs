//! The FedRep baseline: per-round exact (or gradient-based) head fitting
//! with the representation frozen, one local representation gradient step,
//! and unweighted server averaging. Supports spectral (moment-estimator)
//! initialization and the random-initialization variant.

use crate::error::{CoreError, Result};
use crate::flute::{self, local_gradients, FactoredModel};
use crate::metrics::{self, RoundRecord};
use crate::synth::{ClientShard, GroundTruth};
use crate::theory;
use crate::{Matrix, Vector};
use rayon::prelude::*;

/// How each client fits its head with the representation frozen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadMode {
    /// Exact least squares via pseudo-inverse (minimum-norm on rank
    /// deficiency).
    ExactLs,
    /// A fixed number of plain gradient steps from the current head.
    GradSteps { count: usize, step: f64 },
}

/// Representation initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    /// Top-k eigenvectors of the pooled second-moment estimator
    /// `(1/(MN)) sum y^2 x x^T`.
    Spectral,
    /// IID `Normal(0, alpha^2)` entries, matching the other methods'
    /// initialization.
    Random { alpha: f64 },
}

#[derive(Debug, Clone)]
pub struct FedRepConfig {
    /// Representation step size.
    pub eta: f64,
    pub head_mode: HeadMode,
    pub init_mode: InitMode,
    pub rounds: usize,
    pub record_stride: usize,
    pub seed: u64,
}

impl FedRepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "eta",
                reason: format!("must be positive, got {}", self.eta),
            });
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
        if let HeadMode::GradSteps { count, step } = self.head_mode {
            if count < 1 || !(step > 0.0) {
                return Err(CoreError::InvalidParameter {
                    name: "head_mode",
                    reason: format!("grad_steps needs count >= 1 and step > 0, got {count}/{step}"),
                });
            }
        }
        if let InitMode::Random { alpha } = self.init_mode {
            if alpha < 0.0 {
                return Err(CoreError::InvalidParameter {
                    name: "alpha",
                    reason: format!("must be nonnegative, got {alpha}"),
                });
            }
        }
        Ok(())
    }
}

/// Result of a FedRep run. `rank_deficient_solves` counts the
/// (round, client) head solves where `X_i B` was rank deficient and the
/// minimum-norm solution was taken.
#[derive(Debug, Clone)]
pub struct FedRepRun {
    pub model: FactoredModel,
    pub trace: Vec<RoundRecord>,
    pub rank_deficient_solves: usize,
}

/// Top-k eigenvectors of `(1/(MN)) sum_ij y_ij^2 x_ij x_ij^T`, orthonormal
/// with a deterministic sign. For a degenerate (zero) estimator the first
/// `k` canonical directions are returned; the second component flags that
/// case.
pub fn spectral_init(shards: &[ClientShard], k: usize) -> Result<(Matrix, bool)> {
    let d = shards
        .first()
        .map(|s| s.x.ncols())
        .ok_or(CoreError::InvalidParameter {
            name: "shards",
            reason: "nonempty shard list required".into(),
        })?;
    if k < 1 || k > d {
        return Err(CoreError::RankOutOfRange {
            k,
            rows: d,
            cols: d,
        });
    }
    let mut moment = Matrix::zeros(d, d);
    let mut total = 0usize;
    for shard in shards {
        // sum_j y_j^2 x_j x_j^T = Z^T Z with Z = diag(y) X.
        let mut z = shard.x.clone();
        for (r, mut row) in z.row_iter_mut().enumerate() {
            row *= shard.y[r];
        }
        moment += z.transpose() * z;
        total += shard.samples();
    }
    moment /= total as f64;
    if moment.norm() <= 1e-14 {
        let mut b = Matrix::zeros(d, k);
        for j in 0..k {
            b[(j, j)] = 1.0;
        }
        return Ok((b, true));
    }
    let (_, vectors) = crate::linalg::symmetric_eigen_sorted(&moment);
    Ok((vectors.columns(0, k).into_owned(), false))
}

/// Exact least-squares head for one client: `argmin_w ||X B w - y||` via
/// SVD, minimum-norm on rank deficiency. Returns the head and whether the
/// system was rank deficient.
fn solve_head(b: &Matrix, shard: &ClientShard) -> (Vector, bool) {
    let a = &shard.x * b;
    let k = a.ncols();
    let svd = a.svd(true, true);
    let s_max = svd.singular_values.max();
    let cutoff = s_max * 1e-12;
    let deficient = s_max <= 0.0 || svd.singular_values.iter().any(|&s| s <= cutoff);
    if s_max <= 0.0 {
        return (Vector::zeros(k), true);
    }
    let w = svd
        .solve(&shard.y, cutoff)
        .expect("svd solve with factors computed");
    (w, deficient)
}

fn grad_head(b: &Matrix, w0: &Vector, shard: &ClientShard, count: usize, step: f64) -> Vector {
    let mut w = w0.clone();
    let n = shard.samples() as f64;
    for _ in 0..count {
        let residual = &shard.x * (b * &w) - &shard.y;
        w -= step * (b.transpose() * (shard.x.transpose() * residual)) / n;
    }
    w
}

/// Run FedRep for `cfg.rounds` rounds with target rank `k`. Per round:
/// heads are refit with `B` frozen, each client takes one representation
/// gradient step, and the server averages the per-client representations.
pub fn fedrep_train(
    cfg: &FedRepConfig,
    gt: &GroundTruth,
    shards: &[ClientShard],
    k: usize,
) -> Result<FedRepRun> {
    cfg.validate()?;
    if shards.is_empty() {
        return Err(CoreError::InvalidParameter {
            name: "shards",
            reason: "nonempty shard list required".into(),
        });
    }
    let d = gt.d();
    let clients = gt.clients();
    let mut model = match cfg.init_mode {
        InitMode::Random { alpha } => flute::init_factored(d, k, clients, alpha, cfg.seed),
        InitMode::Spectral => {
            let (b, _) = spectral_init(shards, k)?;
            FactoredModel {
                b,
                w: Matrix::zeros(k, clients),
            }
        }
    };
    let mut trace = Vec::new();
    let mut rank_deficient = 0usize;
    record(&mut trace, 0, &model, gt, shards, k, cfg.eta)?;
    for t in 1..=cfg.rounds {
        // Heads with the representation frozen, in parallel; the per-client
        // representations are then averaged in ascending client order.
        let per_client: Vec<(Vector, bool, Matrix)> = shards
            .par_iter()
            .map(|shard| {
                let (w_i, deficient) = match cfg.head_mode {
                    HeadMode::ExactLs => solve_head(&model.b, shard),
                    HeadMode::GradSteps { count, step } => (
                        grad_head(
                            &model.b,
                            &model.w.column(shard.index).into_owned(),
                            shard,
                            count,
                            step,
                        ),
                        false,
                    ),
                };
                let (g_b, _) = local_gradients(&model.b, &w_i, shard);
                let b_i = &model.b - cfg.eta * g_b;
                (w_i, deficient, b_i)
            })
            .collect();
        let mut b_next = Matrix::zeros(d, k);
        for (i, (w_i, deficient, b_i)) in per_client.iter().enumerate() {
            model.w.set_column(i, w_i);
            if *deficient {
                rank_deficient += 1;
            }
            b_next += b_i;
            let _ = i;
        }
        model.b = b_next / clients as f64;
        if t % cfg.record_stride == 0 || t == cfg.rounds {
            record(&mut trace, t, &model, gt, shards, k, cfg.eta)?;
        }
    }
    Ok(FedRepRun {
        model,
        trace,
        rank_deficient_solves: rank_deficient,
    })
}

fn record(
    trace: &mut Vec<RoundRecord>,
    t: usize,
    model: &FactoredModel,
    gt: &GroundTruth,
    shards: &[ClientShard],
    k: usize,
    eta: f64,
) -> Result<()> {
    let mut rec = metrics::linear_metrics(model, gt, k.min(gt.d_under()))?;
    rec.round = t;
    theory::annotate_record(&mut rec, model, gt, k);
    let disc = theory::gradient_discrepancy(model, gt, shards, eta);
    rec.q_norm = disc.q_norm;
    rec.q_tilde_norm = disc.q_tilde_norm;
    trace.push(rec);
    Ok(())
}
