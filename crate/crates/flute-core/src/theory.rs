//! Executable convergence diagnostics for the linear algorithm: the padded
//! symmetric reparameterization of `(B, W)`, its population update, the
//! spectral regions within which convergence is linear, the inverse
//! signal-to-noise ratio, and the empirical-vs-population gradient
//! discrepancy.

use crate::flute::FactoredModel;
use crate::linalg::{complete_orthonormal_basis, kth_singular_value, spectral_norm};
use crate::metrics::{InvSnr, RoundRecord};
use crate::synth::{ClientShard, GroundTruth};
use crate::{Matrix, Vector};

/// Spectrum of the symmetric target `diag(2 Lambda*, -2 Lambda*)` built
/// from the padded ground truth, plus the split point `k`.
#[derive(Debug, Clone)]
pub struct LambdaTilde {
    /// Singular values of `Phi`, length `min(d, M)`.
    lambdas: Vector,
    d_bar: usize,
    pub k: usize,
}

impl LambdaTilde {
    pub fn d_bar(&self) -> usize {
        self.d_bar
    }

    /// All `2 d_bar` eigenvalues `{±2 lambda_i} ∪ {0 padding}` sorted
    /// nonincreasing.
    pub fn sorted_values(&self) -> Vector {
        let mut vals = self.block_diagonal().iter().copied().collect::<Vec<f64>>();
        vals.sort_by(|a, b| b.total_cmp(a));
        Vector::from_vec(vals)
    }

    /// The diagonal of `diag(2 Lambda*, -2 Lambda*)` in construction order,
    /// aligned with the row blocks of the symmetric iterate.
    pub fn block_diagonal(&self) -> Vector {
        let d_under = self.lambdas.len();
        let mut diag = Vector::zeros(2 * self.d_bar);
        for i in 0..d_under {
            diag[i] = 2.0 * self.lambdas[i];
            diag[self.d_bar + i] = -2.0 * self.lambdas[i];
        }
        diag
    }

    /// `lambda*_i`, 1-based, from the sorted spectrum.
    pub fn lambda_star(&self, i: usize) -> f64 {
        assert!(i >= 1 && i <= 2 * self.d_bar);
        self.sorted_values()[i - 1]
    }

    /// Top `k x k` diagonal block of the sorted spectrum.
    pub fn lambda_tilde_k(&self) -> Matrix {
        let sorted = self.sorted_values();
        Matrix::from_diagonal(&Vector::from_iterator(
            self.k,
            sorted.iter().take(self.k).copied(),
        ))
    }

    /// Spectral gap `lambda*_k - lambda*_{k+1} = 2 (lambda_k -
    /// lambda_{k+1})`, with `lambda_{k+1} = 0` past the rank budget.
    pub fn delta_star(&self) -> f64 {
        let next = if self.k < self.lambdas.len() {
            2.0 * self.lambdas[self.k]
        } else {
            0.0
        };
        2.0 * self.lambdas[self.k - 1] - next
    }
}

/// Build the symmetric-target spectrum for rank split `k`.
pub fn lambda_tilde(gt: &GroundTruth, k: usize) -> LambdaTilde {
    assert!(k >= 1 && k <= gt.d_under(), "k out of range");
    LambdaTilde {
        lambdas: gt.svd.singular_values.clone(),
        d_bar: gt.d().max(gt.clients()),
        k,
    }
}

/// The padded symmetric iterate `Theta` (2 d_bar x k) with its top `k x k`
/// block and residual block, plus the rotated factors it was built from.
#[derive(Debug, Clone)]
pub struct ThetaState {
    pub theta: Matrix,
    /// `U*^T B`, padded to `d_bar x k`.
    pub b_tilde: Matrix,
    /// `W V*`, padded to `k x d_bar`.
    pub w_tilde: Matrix,
    pub k: usize,
}

impl ThetaState {
    /// Recover the block split and rotated factors from a raw `2 d_bar x k`
    /// stack.
    pub fn from_matrix(theta: Matrix, k: usize) -> Self {
        let d_bar = theta.nrows() / 2;
        assert_eq!(theta.nrows(), 2 * d_bar, "odd row count");
        let top = theta.rows(0, d_bar).into_owned();
        let bottom = theta.rows(d_bar, d_bar).into_owned();
        let sqrt2 = 2.0f64.sqrt();
        let b_tilde = (&top + &bottom) / sqrt2;
        let w_tilde = ((&top - &bottom) / sqrt2).transpose();
        Self {
            theta,
            b_tilde,
            w_tilde,
            k,
        }
    }

    pub fn d_bar(&self) -> usize {
        self.theta.nrows() / 2
    }

    /// Top `k x k` block.
    pub fn theta_k(&self) -> Matrix {
        self.theta.rows(0, self.k).into_owned()
    }

    /// Bottom `(2 d_bar - k) x k` block.
    pub fn theta_res(&self) -> Matrix {
        self.theta
            .rows(self.k, self.theta.nrows() - self.k)
            .into_owned()
    }
}

fn pad_rows(a: &Matrix, rows: usize) -> Matrix {
    if a.nrows() == rows {
        return a.clone();
    }
    let mut out = Matrix::zeros(rows, a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out
}

fn pad_cols(a: &Matrix, cols: usize) -> Matrix {
    if a.ncols() == cols {
        return a.clone();
    }
    let mut out = Matrix::zeros(a.nrows(), cols);
    out.columns_mut(0, a.ncols()).copy_from(a);
    out
}

/// Map a factored model into the symmetric iterate:
/// `Theta = stack[(B~ + W~^T)/sqrt(2); (B~ - W~^T)/sqrt(2)]` where
/// `B~ = U*^T B` and `W~ = W V*` after zero-padding everything to the
/// `d_bar`-dimensional square frame. `U*` and `V*` are deterministic
/// orthogonal completions of the padded singular-vector factors.
pub fn build_theta(model: &FactoredModel, gt: &GroundTruth) -> ThetaState {
    assert_eq!(model.d(), gt.d(), "model/ground-truth dimension mismatch");
    assert_eq!(model.clients(), gt.clients());
    let d_bar = gt.d().max(gt.clients());
    let u_star = complete_orthonormal_basis(&pad_rows(&gt.svd.left_vectors, d_bar));
    let v_star = complete_orthonormal_basis(&pad_rows(&gt.svd.right_vectors, d_bar));
    let b_pad = pad_rows(&model.b, d_bar);
    let w_pad = pad_cols(&model.w, d_bar);
    let b_tilde = u_star.transpose() * b_pad;
    let w_tilde = w_pad * v_star;
    let sqrt2 = 2.0f64.sqrt();
    let w_tilde_t = w_tilde.transpose();
    let top = (&b_tilde + &w_tilde_t) / sqrt2;
    let bottom = (&b_tilde - &w_tilde_t) / sqrt2;
    let mut theta = Matrix::zeros(2 * d_bar, model.k());
    theta.rows_mut(0, d_bar).copy_from(&top);
    theta.rows_mut(d_bar, d_bar).copy_from(&bottom);
    ThetaState {
        theta,
        b_tilde,
        w_tilde,
        k: model.k(),
    }
}

/// One population step of the symmetric cubic dynamics:
/// `Theta+ = Theta + (eta/2) LambdaTilde Theta - (eta/2) Theta Theta^T Theta`.
pub fn theta_population_step(theta: &Matrix, lt: &LambdaTilde, eta: f64) -> Matrix {
    assert_eq!(theta.nrows(), 2 * lt.d_bar(), "theta/spectrum mismatch");
    let diag = lt.block_diagonal();
    let mut scaled = theta.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= diag[i];
    }
    let gram = theta.transpose() * theta;
    theta + (eta / 2.0) * scaled - (eta / 2.0) * theta * gram
}

/// Membership flags for the spectral regions, with a `1e-12` comparison
/// slack on each boundary.
#[derive(Debug, Clone, Copy)]
pub struct RegionFlags {
    pub in_r: bool,
    pub in_rs: bool,
    pub sigma1_sq_theta: f64,
    pub sigma1_sq_res: f64,
    pub sigmak_sq_k: f64,
    /// Set when the gap vanishes and the region bounds degenerate.
    pub delta_zero_warning: bool,
}

const REGION_SLACK: f64 = 1e-12;

/// Region membership: `R` requires `sigma_1^2(Theta) <= 2 lambda*_1`,
/// `sigma_1^2(Theta_res) <= lambda*_k - Delta/2`, and
/// `sigma_k^2(Theta_k) >= Delta/4`; `R_s` drops the last condition.
pub fn region_membership(ts: &ThetaState, lt: &LambdaTilde) -> RegionFlags {
    let delta = lt.delta_star();
    let lambda1 = lt.lambda_star(1);
    let lambda_k = lt.lambda_star(lt.k);
    let s1_theta = spectral_norm(&ts.theta);
    let s1_res = spectral_norm(&ts.theta_res());
    let sk_k = kth_singular_value(&ts.theta_k(), lt.k);
    let sigma1_sq_theta = s1_theta * s1_theta;
    let sigma1_sq_res = s1_res * s1_res;
    let sigmak_sq_k = sk_k * sk_k;
    let in_rs = sigma1_sq_theta <= 2.0 * lambda1 + REGION_SLACK
        && sigma1_sq_res <= lambda_k - delta / 2.0 + REGION_SLACK;
    let in_r = in_rs && sigmak_sq_k >= delta / 4.0 - REGION_SLACK;
    RegionFlags {
        in_r,
        in_rs,
        sigma1_sq_theta,
        sigma1_sq_res,
        sigmak_sq_k,
        delta_zero_warning: delta <= 0.0,
    }
}

/// Inverse SNR and distance-to-optimum quantities.
#[derive(Debug, Clone, Copy)]
pub struct SnrDist {
    /// `sigma_1^2(Theta_res) / sigma_k^2(Theta_k)`.
    pub inv_snr: InvSnr,
    /// `sigma_1(Theta_k Theta_k^T - LambdaTilde_k)`.
    pub d_spec: f64,
    /// `||Theta Theta^T - diag(LambdaTilde_k, 0)||_F`.
    pub d_full_frob: f64,
    /// `||B~ W~ - diag(Lambda_k, 0)||_F` in the rotated frame.
    pub bridge_lhs: f64,
}

pub fn snr_and_dist(ts: &ThetaState, lt: &LambdaTilde) -> SnrDist {
    let theta_k = ts.theta_k();
    let theta_res = ts.theta_res();
    let sk = kth_singular_value(&theta_k, lt.k);
    let s1_res = spectral_norm(&theta_res);
    let inv_snr = if sk > 0.0 {
        InvSnr::Finite((s1_res * s1_res) / (sk * sk))
    } else {
        InvSnr::Infinite
    };
    let d_spec = spectral_norm(&(&theta_k * theta_k.transpose() - lt.lambda_tilde_k()));

    let n = 2 * lt.d_bar();
    let mut target = Matrix::zeros(n, n);
    target
        .view_mut((0, 0), (lt.k, lt.k))
        .copy_from(&lt.lambda_tilde_k());
    let d_full_frob = (&ts.theta * ts.theta.transpose() - target).norm();

    let d_bar = lt.d_bar();
    let mut bw_target = Matrix::zeros(d_bar, d_bar);
    let sorted = lt.sorted_values();
    for i in 0..lt.k {
        // LambdaTilde entries are 2 lambda; the factored-product target
        // uses lambda itself.
        bw_target[(i, i)] = sorted[i] / 2.0;
    }
    let bridge_lhs = (&ts.b_tilde * &ts.w_tilde - bw_target).norm();
    SnrDist {
        inv_snr,
        d_spec,
        d_full_frob,
        bridge_lhs,
    }
}

/// Bound on the number of rounds for a small random initialization to
/// enter region `R`:
/// `T_R = log(Delta / (4 sigma_k^2(Theta_k^0))) /
///        (2 log(1 + (eta/2)(lambda*_k - Delta/2)))`.
/// Returns `+inf` when `sigma_k(Theta_k^0) = 0`. Callers ceil the value
/// when using it as a round count.
pub fn t_region(theta0: &ThetaState, lt: &LambdaTilde, eta: f64) -> f64 {
    let sk = kth_singular_value(&theta0.theta_k(), lt.k);
    if sk <= 0.0 {
        return f64::INFINITY;
    }
    let delta = lt.delta_star();
    let lambda_k = lt.lambda_star(lt.k);
    let numerator = (delta / (4.0 * sk * sk)).ln();
    let denominator = 2.0 * (1.0 + (eta / 2.0) * (lambda_k - delta / 2.0)).ln();
    numerator / denominator
}

/// The gradient-discrepancy matrices `Q` (d x k) and `Q~` (k x M): the gap
/// between empirical and population aggregated updates, step size
/// included.
#[derive(Debug, Clone)]
pub struct Discrepancy {
    pub q: Matrix,
    pub q_tilde: Matrix,
    pub q_norm: f64,
    pub q_tilde_norm: f64,
    /// Spectral norms with the `eta` factor divided out, for
    /// step-size-independent concentration plots.
    pub q_norm_unit: f64,
    pub q_tilde_norm_unit: f64,
}

pub fn gradient_discrepancy(
    model: &FactoredModel,
    gt: &GroundTruth,
    shards: &[ClientShard],
    eta: f64,
) -> Discrepancy {
    let d = model.d();
    let k = model.k();
    let clients = model.clients();
    let mut q = Matrix::zeros(d, k);
    let mut q_tilde = Matrix::zeros(k, clients);
    for shard in shards {
        let i = shard.index;
        let w_i = model.w.column(i).into_owned();
        let n = shard.samples() as f64;
        let err = &model.b * &w_i - gt.phi.column(i);
        let cov_err = shard.x.transpose() * (&shard.x * &err) / n;
        let noise = shard.noise(gt);
        let noise_term = shard.x.transpose() * &noise / n;
        let col = &err - &cov_err + &noise_term;
        q += eta * &col * w_i.transpose();
        let qt_col = model.b.transpose() * col;
        q_tilde.set_column(i, &(eta * qt_col));
    }
    let q_norm = spectral_norm(&q);
    let q_tilde_norm = spectral_norm(&q_tilde);
    Discrepancy {
        q_norm_unit: q_norm / eta,
        q_tilde_norm_unit: q_tilde_norm / eta,
        q,
        q_tilde,
        q_norm,
        q_tilde_norm,
    }
}

/// Fill the theory fields of a round record from the current model.
pub fn annotate_record(rec: &mut RoundRecord, model: &FactoredModel, gt: &GroundTruth, k: usize) {
    // Over-parameterized runs use the k = d_under split on the same iterate.
    let kk = k.min(gt.d_under());
    let lt = lambda_tilde(gt, kk);
    let mut ts = build_theta(model, gt);
    ts.k = kk;
    let flags = region_membership(&ts, &lt);
    let snr = snr_and_dist(&ts, &lt);
    rec.in_r = flags.in_r;
    rec.in_rs = flags.in_rs;
    rec.inv_snr = snr.inv_snr;
    rec.d_spec = snr.d_spec;
    rec.delta_zero_warning = flags.delta_zero_warning;
}
