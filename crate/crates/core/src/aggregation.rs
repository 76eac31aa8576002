//! Server-side aggregation rules.
//!
//! All rules consume [`LocalUpdate`]s in the order given (a multiset: repeated
//! devices appear repeatedly) and sum in that order.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::local_solver::LocalUpdate;
use crate::numerics::{dot_unchecked, ParamVector};
use crate::selection::heterogeneity_scores;

/// Denominators below this magnitude trigger the averaging fallback.
pub const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub params: ParamVector,
    /// Weight applied to each contributing update, aligned with the input order.
    pub weights: Vec<f64>,
    /// Global gradient estimate from the updating set.
    pub grad_estimate: Option<ParamVector>,
    /// Global gradient estimate from the calibration set (two-set rule only).
    pub second_estimate: Option<ParamVector>,
    /// Weight normalizer actually used, when the rule has one.
    pub normalizer: Option<f64>,
    /// The rule degenerated and plain averaging was applied.
    pub fallback: bool,
}

fn nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        Err(FedError::Aggregation(format!("no {what} to aggregate")))
    } else {
        Ok(())
    }
}

fn check_dims(center: &ParamVector, updates: &[LocalUpdate]) -> Result<()> {
    for u in updates {
        u.w_next.check_len(center.len())?;
        u.grad_at_center.check_len(center.len())?;
    }
    Ok(())
}

/// Mean of the given gradients (repeats counted).
pub fn mean_gradient<'a, I>(grads: I) -> Result<ParamVector>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut iter = grads.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| FedError::Aggregation("no gradients to average".into()))?;
    let mut acc = first.clone();
    let mut count = 1usize;
    for g in iter {
        g.check_len(acc.len())?;
        acc.axpy(1.0, g);
        count += 1;
    }
    acc.scale(1.0 / count as f64);
    Ok(acc)
}

/// `(1/K) sum_k grad F_k(w^t)` over the update multiset.
pub fn estimate_global_gradient(updates: &[LocalUpdate]) -> Result<ParamVector> {
    nonempty(updates, "updates")?;
    mean_gradient(updates.iter().map(|u| &u.grad_at_center))
}

/// `center + sum_k weight_k * delta_k`.
fn apply_weights(center: &ParamVector, updates: &[LocalUpdate], weights: &[f64]) -> ParamVector {
    let mut w = center.clone();
    for (u, wt) in updates.iter().zip(weights) {
        w.axpy(*wt, &u.delta);
    }
    w
}

/// Plain averaging of the returned parameters, `w^{t+1} = (1/K) sum_k w_k^{t+1}`.
pub fn aggregate_average(center: &ParamVector, updates: &[LocalUpdate]) -> Result<AggregationReport> {
    nonempty(updates, "updates")?;
    check_dims(center, updates)?;
    let k = updates.len() as f64;
    let mut w = ParamVector::zeros(center.len());
    for u in updates {
        w.axpy(1.0, &u.w_next);
    }
    w.scale(1.0 / k);
    Ok(AggregationReport {
        params: w,
        weights: vec![1.0 / k; updates.len()],
        grad_estimate: None,
        second_estimate: None,
        normalizer: None,
        fallback: false,
    })
}

fn fallback_average(center: &ParamVector, updates: &[LocalUpdate], rule: &str, normalizer: f64) -> Result<AggregationReport> {
    log::info!("{rule}: degenerate normalizer {normalizer:e}, averaging instead");
    let mut report = aggregate_average(center, updates)?;
    report.fallback = true;
    report.normalizer = Some(normalizer);
    Ok(report)
}

/// Sign-corrected averaging using the exact global gradient:
/// `w^{t+1} = w^t + (1/K) sum_k sign(<grad f, grad F_k>) delta_k`, with `sign(0) = +1`.
pub fn aggregate_signed(
    center: &ParamVector,
    updates: &[LocalUpdate],
    global_grad: &ParamVector,
) -> Result<AggregationReport> {
    nonempty(updates, "updates")?;
    check_dims(center, updates)?;
    global_grad.check_len(center.len())?;
    let k = updates.len() as f64;
    let weights: Vec<f64> = updates
        .iter()
        .map(|u| {
            if dot_unchecked(global_grad, &u.grad_at_center) < 0.0 {
                -1.0 / k
            } else {
                1.0 / k
            }
        })
        .collect();
    Ok(AggregationReport {
        params: apply_weights(center, updates, &weights),
        weights,
        grad_estimate: None,
        second_estimate: None,
        normalizer: None,
        fallback: false,
    })
}

/// Two-set rule: updates from `S1` weighted by `<grad F_k, g1>` over the
/// signed calibration sum `sum_{k' in S2} <grad F_k', g2>`, where `g_i` is the
/// mean gradient of set `i`.
pub fn aggregate_folb_two_set(
    center: &ParamVector,
    updates: &[LocalUpdate],
    calibration_grads: &[ParamVector],
) -> Result<AggregationReport> {
    nonempty(updates, "updates")?;
    nonempty(calibration_grads, "calibration gradients")?;
    check_dims(center, updates)?;
    let g1 = estimate_global_gradient(updates)?;
    let g2 = mean_gradient(calibration_grads)?;
    let denom: f64 = calibration_grads.iter().map(|g| dot_unchecked(g, &g2)).sum();
    if !(denom.abs() >= DEGENERATE_TOL) {
        let mut r = fallback_average(center, updates, "two-set", denom)?;
        r.grad_estimate = Some(g1);
        r.second_estimate = Some(g2);
        return Ok(r);
    }
    let weights: Vec<f64> = updates
        .iter()
        .map(|u| dot_unchecked(&u.grad_at_center, &g1) / denom)
        .collect();
    Ok(AggregationReport {
        params: apply_weights(center, updates, &weights),
        weights,
        grad_estimate: Some(g1),
        second_estimate: Some(g2),
        normalizer: Some(denom),
        fallback: false,
    })
}

/// Weights `score_k / sum |score|`; `None` when the sum is degenerate.
fn abs_normalized(scores: &[f64]) -> (f64, Option<Vec<f64>>) {
    let total: f64 = scores.iter().map(|s| s.abs()).sum();
    if !(total >= DEGENERATE_TOL) {
        return (total, None);
    }
    (total, Some(scores.iter().map(|s| s / total).collect()))
}

fn score_weighted(
    center: &ParamVector,
    updates: &[LocalUpdate],
    g1: ParamVector,
    scores: &[f64],
    rule: &str,
) -> Result<AggregationReport> {
    let (total, weights) = abs_normalized(scores);
    let Some(weights) = weights else {
        let mut r = fallback_average(center, updates, rule, total)?;
        r.grad_estimate = Some(g1);
        return Ok(r);
    };
    Ok(AggregationReport {
        params: apply_weights(center, updates, &weights),
        weights,
        grad_estimate: Some(g1),
        second_estimate: None,
        normalizer: Some(total),
        fallback: false,
    })
}

/// Single-set rule: weights `<grad F_k, g1> / sum_k' |<grad F_k', g1>|`, so `sum |weight| = 1`.
pub fn aggregate_folb_single(center: &ParamVector, updates: &[LocalUpdate]) -> Result<AggregationReport> {
    nonempty(updates, "updates")?;
    check_dims(center, updates)?;
    let g1 = estimate_global_gradient(updates)?;
    let scores: Vec<f64> = updates.iter().map(|u| dot_unchecked(&u.grad_at_center, &g1)).collect();
    score_weighted(center, updates, g1, &scores, "single-set")
}

/// Heterogeneity-aware single-set rule with scores
/// `I_k = <g1, grad F_k> - psi * gamma_k * ||g1||^2`.
pub fn aggregate_folb_het(center: &ParamVector, updates: &[LocalUpdate], psi: f64) -> Result<AggregationReport> {
    nonempty(updates, "updates")?;
    check_dims(center, updates)?;
    let g1 = estimate_global_gradient(updates)?;
    let inner: Vec<f64> = updates.iter().map(|u| dot_unchecked(&u.grad_at_center, &g1)).collect();
    let gammas: Vec<f64> = updates.iter().map(|u| u.gamma).collect();
    let scores = heterogeneity_scores(&inner, &gammas, g1.norm_sq(), psi)?;
    score_weighted(center, updates, g1, &scores, "heterogeneity-aware")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    fn update(center: &ParamVector, delta: &[f64], grad: &[f64], gamma: f64) -> LocalUpdate {
        let delta = pv(delta);
        let mut w_next = center.clone();
        w_next.axpy(1.0, &delta);
        LocalUpdate {
            device_id: 0,
            w_next,
            delta,
            grad_at_center: pv(grad),
            gamma,
            steps: 1,
            elapsed: 1.0,
        }
    }

    #[test]
    fn global_gradient_estimates() {
        let c = pv(&[0.0, 0.0]);
        let a = update(&c, &[0.0, 0.0], &[1.0, 2.0], 0.5);
        let b = update(&c, &[0.0, 0.0], &[-1.0, -2.0], 0.5);
        assert_eq!(estimate_global_gradient(&[a.clone()]).unwrap(), a.grad_at_center);
        assert_eq!(estimate_global_gradient(&[a.clone(), b]).unwrap(), pv(&[0.0, 0.0]));
        assert_eq!(estimate_global_gradient(&[a.clone(), a.clone()]).unwrap(), a.grad_at_center);
        assert!(estimate_global_gradient(&[]).is_err());
    }

    #[test]
    fn averaging() {
        let c = pv(&[1.0, -1.0]);
        let v = update(&c, &[0.5, 0.5], &[1.0, 0.0], 0.1);
        let r = aggregate_average(&c, &[v.clone(), v.clone(), v.clone()]).unwrap();
        assert_eq!(r.params, v.w_next);

        let plus = update(&c, &[0.25, -2.0], &[1.0, 0.0], 0.1);
        let minus = update(&c, &[-0.25, 2.0], &[1.0, 0.0], 0.1);
        assert_eq!(aggregate_average(&c, &[plus, minus]).unwrap().params, c);

        let k = update(&c, &[3.0, 0.0], &[1.0, 0.0], 0.1);
        let j = update(&c, &[0.0, 3.0], &[1.0, 0.0], 0.1);
        let r = aggregate_average(&c, &[k.clone(), k, j]).unwrap();
        assert_eq!(r.params, pv(&[3.0, 0.0]));
        assert!(aggregate_average(&c, &[]).is_err());
    }

    #[test]
    fn signed_rule() {
        let c = pv(&[0.0, 0.0]);
        let global = pv(&[1.0, 0.0]);
        let ups = [
            update(&c, &[1.0, 1.0], &[2.0, 0.0], 0.0),
            update(&c, &[2.0, -1.0], &[1.0, 5.0], 0.0),
        ];
        let s = aggregate_signed(&c, &ups, &global).unwrap();
        let a = aggregate_average(&c, &ups).unwrap();
        assert_eq!(s.params, a.params);

        let neg = update(&c, &[2.0, 0.0], &[-1.0, 0.0], 0.0);
        let zero = update(&c, &[0.0, 4.0], &[0.0, 3.0], 0.0);
        let s = aggregate_signed(&c, &[neg, zero], &global).unwrap();
        assert_eq!(s.weights, vec![-0.5, 0.5]);
        assert_eq!(s.params, pv(&[-1.0, 2.0]));
    }

    #[test]
    fn two_set_weights() {
        let c = pv(&[0.0, 0.0]);
        // S1 gradients both (2,0): inner products 4 each
        let s1 = [
            update(&c, &[1.0, 0.0], &[2.0, 0.0], 0.0),
            update(&c, &[0.0, 1.0], &[2.0, 0.0], 0.0),
        ];
        // <g,g2> summed over S2 with g2 = mean: two copies of (2,0) -> 8
        let s2 = [pv(&[2.0, 0.0]), pv(&[2.0, 0.0])];
        let r = aggregate_folb_two_set(&c, &s1, &s2).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
        assert_eq!(r.normalizer, Some(8.0));
        // g1 = (1, 1): inner products (2, 2) against denominator 8
        let s1 = [
            update(&c, &[1.0, 0.0], &[2.0, 0.0], 0.0),
            update(&c, &[0.0, 1.0], &[0.0, 2.0], 0.0),
        ];
        let r = aggregate_folb_two_set(&c, &s1, &s2).unwrap();
        assert_eq!(r.weights, vec![0.25, 0.25]);
        assert_eq!(r.params, pv(&[0.25, 0.25]));
    }

    #[test]
    fn two_set_same_single_device() {
        let c = pv(&[0.0, 0.0, 0.0]);
        let g = [0.3, -1.2, 2.0];
        let r = aggregate_folb_two_set(&c, &[update(&c, &[1.0, 1.0, 1.0], &g, 0.0)], &[pv(&g)]).unwrap();
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn two_set_negative_and_degenerate_denominator() {
        let c = pv(&[0.0, 0.0]);
        let s1 = [update(&c, &[1.0, 0.0], &[1.0, 0.0], 0.0)];
        // mean of (1,0),(-3,0) is (-1,0); sum of <g, g2> = -1 + 3 = 2 > 0
        let r = aggregate_folb_two_set(&c, &s1, &[pv(&[1.0, 0.0]), pv(&[-3.0, 0.0])]).unwrap();
        assert!(r.normalizer.unwrap() > 0.0);
        let r = aggregate_folb_two_set(&c, &s1, &[pv(&[0.0, 0.0])]).unwrap();
        assert!(r.fallback);
        assert_eq!(r.params, s1[0].w_next);
    }

    #[test]
    fn single_set_examples() {
        let c = pv(&[0.0, 0.0]);
        // g1 = mean((3,0),(-1,0)) = (1,0): inner products (3, -1)
        let ups = [
            update(&c, &[1.0, 0.0], &[3.0, 0.0], 0.0),
            update(&c, &[0.0, 1.0], &[-1.0, 0.0], 0.0),
        ];
        let r = aggregate_folb_single(&c, &ups).unwrap();
        assert_eq!(r.weights, vec![0.75, -0.25]);
        assert_eq!(r.params, pv(&[0.75, -0.25]));

        let same = update(&c, &[0.5, 0.25], &[1.0, 2.0], 0.0);
        let r = aggregate_folb_single(&c, &[same.clone(), same.clone(), same.clone(), same.clone()]).unwrap();
        assert_eq!(r.params, same.w_next);

        let r = aggregate_folb_single(&c, &[update(&c, &[1.0, 1.0], &[-4.0, 1.0], 0.0)]).unwrap();
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn single_set_zero_gradients_fall_back() {
        let c = pv(&[0.0]);
        let ups = [update(&c, &[1.0], &[0.0], 0.0), update(&c, &[3.0], &[0.0], 0.0)];
        let r = aggregate_folb_single(&c, &ups).unwrap();
        assert!(r.fallback);
        assert_eq!(r.params, pv(&[2.0]));
    }

    #[test]
    fn heterogeneity_aware_reductions() {
        let c = pv(&[0.1, 0.2]);
        let ups = [
            update(&c, &[1.0, 0.5], &[0.3, 2.0], 0.7),
            update(&c, &[-0.2, 0.5], &[1.1, -0.4], 0.2),
            update(&c, &[0.4, 0.0], &[-0.6, 0.9], 0.9),
        ];
        let single = aggregate_folb_single(&c, &ups).unwrap();
        assert_eq!(aggregate_folb_het(&c, &ups, 0.0).unwrap(), single);
        let mut zero_gamma = ups.clone();
        zero_gamma.iter_mut().for_each(|u| u.gamma = 0.0);
        assert_eq!(aggregate_folb_het(&c, &zero_gamma, 10.0).unwrap(), single);
    }

    #[test]
    fn heterogeneity_aware_example() {
        let c = pv(&[0.0, 0.0]);
        // g1 = mean((1,1),(1,-1)) = (1,0); inner products (1,1); ||g1||^2 = 1
        let ups = [
            update(&c, &[1.0, 0.0], &[1.0, 1.0], 0.0),
            update(&c, &[0.0, 1.0], &[1.0, -1.0], 1.0),
        ];
        let r = aggregate_folb_het(&c, &ups, 1.0).unwrap();
        assert_eq!(r.weights, vec![1.0, 0.0]);
    }
}
