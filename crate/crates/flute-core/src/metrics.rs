//! Error metrics against the ground truth and the rank-k optimum.

use crate::error::Result;
use crate::flute::FactoredModel;
use crate::linalg::truncated_svd;
use crate::synth::GroundTruth;

/// Serialized sentinel used when the inverse SNR is undefined
/// (`sigma_k(Theta_k) = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InvSnr {
    Finite(f64),
    Infinite,
}

impl InvSnr {
    pub fn as_f64(&self) -> f64 {
        match self {
            InvSnr::Finite(v) => *v,
            InvSnr::Infinite => f64::INFINITY,
        }
    }

    /// CSV token: the decimal value, or the literal `inf`.
    pub fn csv_token(&self) -> String {
        match self {
            InvSnr::Finite(v) => format!("{v:.16e}"),
            InvSnr::Infinite => "inf".to_string(),
        }
    }
}

/// Per-round metrics for the linear methods.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    /// `(1/M) sum_i ||B w_i - phi_i||`.
    pub avg_err_gt: f64,
    /// `(1/M) sum_i ||B w_i - (Phi_k)_i||`.
    pub avg_err_opt: f64,
    /// `||B W - Phi_k||_F`.
    pub frob_to_opt: f64,
    pub in_r: bool,
    pub in_rs: bool,
    pub inv_snr: InvSnr,
    /// `sigma_1(Theta_k Theta_k^T - LambdaTilde_k)`.
    pub d_spec: f64,
    /// Spectral norm of the representation-gradient discrepancy `Q`.
    pub q_norm: f64,
    /// Spectral norm of the head-gradient discrepancy `Q~`.
    pub q_tilde_norm: f64,
    /// Set when the spectral gap at `k` vanishes, which voids the region
    /// diagnostics.
    pub delta_zero_warning: bool,
}

impl RoundRecord {
    pub fn new(round: usize) -> Self {
        Self {
            round,
            avg_err_gt: 0.0,
            avg_err_opt: 0.0,
            frob_to_opt: 0.0,
            in_r: false,
            in_rs: false,
            inv_snr: InvSnr::Finite(0.0),
            d_spec: 0.0,
            q_norm: 0.0,
            q_tilde_norm: 0.0,
            delta_zero_warning: false,
        }
    }
}

/// Error metrics of a factored model against `Phi` and its best rank-`k`
/// approximation. The optimum is compared as a product (`Phi_k` columns),
/// not against any particular factor pair.
pub fn linear_metrics(model: &FactoredModel, gt: &GroundTruth, k: usize) -> Result<RoundRecord> {
    let (_, _, _, phi_k) = truncated_svd(&gt.phi, k)?;
    let product = model.product();
    let m = gt.clients() as f64;
    let mut avg_err_gt = 0.0;
    let mut avg_err_opt = 0.0;
    for i in 0..gt.clients() {
        avg_err_gt += (product.column(i) - gt.phi.column(i)).norm();
        avg_err_opt += (product.column(i) - phi_k.column(i)).norm();
    }
    let mut rec = RoundRecord::new(0);
    rec.avg_err_gt = avg_err_gt / m;
    rec.avg_err_opt = avg_err_opt / m;
    rec.frob_to_opt = (&product - &phi_k).norm();
    Ok(rec)
}
