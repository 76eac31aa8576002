//! Device-selection distributions.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numerics::{dot_unchecked, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    Uniform,
    LbNearOptimal,
    NormProportional,
    Lbh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDistribution {
    pub kind: SelectionKind,
    pub probs: Vec<f64>,
    /// Set when every score was zero and uniform probabilities were substituted.
    pub fallback: bool,
}

pub fn uniform_distribution(devices: usize) -> Result<SelectionDistribution> {
    if devices == 0 {
        return Err(FedError::Distribution("no devices".into()));
    }
    Ok(SelectionDistribution {
        kind: SelectionKind::Uniform,
        probs: vec![1.0 / devices as f64; devices],
        fallback: false,
    })
}

/// Normalizes `|score|`; all-zero scores fall back to uniform.
fn from_scores(kind: SelectionKind, scores: &[f64]) -> Result<SelectionDistribution> {
    if scores.is_empty() {
        return Err(FedError::Distribution("no devices".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FedError::Distribution("non-finite selection score".into()));
    }
    let total: f64 = scores.iter().map(|s| s.abs()).sum();
    if total == 0.0 {
        log::info!("{kind:?}: all selection scores are zero, using uniform probabilities");
        let mut d = uniform_distribution(scores.len())?;
        d.kind = kind;
        d.fallback = true;
        return Ok(d);
    }
    Ok(SelectionDistribution {
        kind,
        probs: scores.iter().map(|s| s.abs() / total).collect(),
        fallback: false,
    })
}

/// Inner products `<global, local_k>` for every device.
pub fn alignment_scores(local_grads: &[ParamVector], global_grad: &ParamVector) -> Result<Vec<f64>> {
    local_grads
        .iter()
        .map(|g| {
            g.check_len(global_grad.len())?;
            Ok(dot_unchecked(global_grad, g))
        })
        .collect()
}

/// `P_k ∝ |<grad f, grad F_k>|`.
pub fn lb_near_optimal_distribution(
    local_grads: &[ParamVector],
    global_grad: &ParamVector,
) -> Result<SelectionDistribution> {
    from_scores(SelectionKind::LbNearOptimal, &alignment_scores(local_grads, global_grad)?)
}

/// `P_k ∝ ||grad F_k||`, the Cauchy-Schwarz surrogate that needs no global gradient.
pub fn norm_proportional_distribution(local_grads: &[ParamVector]) -> Result<SelectionDistribution> {
    let norms: Vec<f64> = local_grads.iter().map(|g| g.norm()).collect();
    from_scores(SelectionKind::NormProportional, &norms)
}

/// Heterogeneity-adjusted scores `<grad f, grad F_k> - psi * gamma_k * ||grad f||^2`.
pub fn heterogeneity_scores(inner: &[f64], gammas: &[f64], global_norm_sq: f64, psi: f64) -> Result<Vec<f64>> {
    if inner.len() != gammas.len() {
        return Err(FedError::Dimension {
            expected: inner.len(),
            got: gammas.len(),
        });
    }
    Ok(inner
        .iter()
        .zip(gammas)
        .map(|(ip, g)| ip - psi * g * global_norm_sq)
        .collect())
}

/// `P_k ∝ |I_k|` with `I_k` from [`heterogeneity_scores`].
pub fn lbh_distribution(
    local_grads: &[ParamVector],
    global_grad: &ParamVector,
    gammas: &[f64],
    psi: f64,
) -> Result<SelectionDistribution> {
    let inner = alignment_scores(local_grads, global_grad)?;
    let scores = heterogeneity_scores(&inner, gammas, global_grad.norm_sq(), psi)?;
    from_scores(SelectionKind::Lbh, &scores)
}
