//! One device's round: inexact minimization of the proximal objective by
//! (minibatch) gradient descent under a step budget and a time budget.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::models::{LossModel, ProximalObjective};
use crate::numerics::{ParamVector, RngStream, StreamRole};

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub device_id: usize,
    /// Upper bound on one round of communication with the server.
    pub comm_delay: f64,
    pub steps_min: usize,
    pub steps_max: usize,
    pub learning_rate: f64,
    /// 0 means full-batch gradient descent.
    pub minibatch: usize,
    /// Simulated time consumed by one local step.
    pub step_cost: f64,
    /// Seed of this device's random streams.
    pub seed: u64,
}

impl DeviceProfile {
    pub fn new(device_id: usize, seed: u64) -> Self {
        DeviceProfile {
            device_id,
            comm_delay: 0.0,
            steps_min: 1,
            steps_max: 20,
            learning_rate: 0.01,
            minibatch: 0,
            step_cost: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.comm_delay >= 0.0) {
            return Err(FedError::Config(format!("negative communication delay {}", self.comm_delay)));
        }
        if self.steps_min < 1 || self.steps_min > self.steps_max {
            return Err(FedError::Config(format!(
                "step range [{}, {}] must satisfy 1 <= min <= max",
                self.steps_min, self.steps_max
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.step_cost > 0.0) {
            return Err(FedError::Config("learning rate and step cost must be positive".into()));
        }
        Ok(())
    }
}

/// 99th percentile of an exponential delay with the given mean.
pub fn delay_bound_p99(mean: f64) -> f64 {
    mean * 100f64.ln()
}

/// Per-device delay bounds: each device's mean delay is drawn from
/// `Exp(mean = delay_mean)` once, and its bound is that distribution's 99th percentile.
pub fn draw_delay_bounds(devices: usize, delay_mean: f64, seed: u64) -> Vec<f64> {
    (0..devices)
        .map(|k| {
            if delay_mean <= 0.0 {
                return 0.0;
            }
            let mut rng = RngStream::keyed(seed, StreamRole::Delay, k as u64, 0).rng();
            let u: f64 = 1.0 - rng.random::<f64>();
            delay_bound_p99(-delay_mean * u.ln())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub device_id: usize,
    pub w_next: ParamVector,
    /// `w_next - center`
    pub delta: ParamVector,
    pub grad_at_center: ParamVector,
    pub gamma: f64,
    pub steps: usize,
    pub elapsed: f64,
}

/// Uniform integer in `[steps_min, steps_max]`, keyed by `(seed, device, round)`
/// so every strategy sharing a seed sees the same budgets.
pub fn draw_step_budget(profile: &DeviceProfile, round: u64) -> usize {
    let mut rng = RngStream::keyed(profile.seed, StreamRole::StepBudget, profile.device_id as u64, round).rng();
    rng.random_range(profile.steps_min..=profile.steps_max)
}

/// Number of steps that fit in the round, or a timeout when none do.
pub fn steps_within_budget(profile: &DeviceProfile, tau: f64, budget: usize) -> Result<usize> {
    let timeout = FedError::Timeout {
        device: profile.device_id,
        tau,
        delay: profile.comm_delay,
    };
    if tau <= profile.comm_delay {
        return Err(timeout);
    }
    if tau.is_infinite() {
        return Ok(budget);
    }
    let fit = ((tau - profile.comm_delay) / profile.step_cost).floor();
    let steps = if fit >= budget as f64 { budget } else { fit as usize };
    if steps == 0 {
        return Err(timeout);
    }
    Ok(steps)
}

/// Runs this round's step budget (capped by `tau`) from `center`.
pub fn local_solve(
    profile: &DeviceProfile,
    model: &LossModel,
    data: &Dataset,
    center: &ParamVector,
    mu: f64,
    tau: f64,
    round: u64,
) -> Result<LocalUpdate> {
    let steps = steps_within_budget(profile, tau, draw_step_budget(profile, round))?;
    run_local_steps(profile, model, data, center, mu, steps, round)
}

/// Exactly `steps` descent steps on `F_k(w) + (mu/2)||w - center||^2`.
///
/// `gamma = ||grad h(w_next)|| / ||grad F_k(center)||`, or 0 when the
/// gradient at the center vanishes.
pub fn run_local_steps(
    profile: &DeviceProfile,
    model: &LossModel,
    data: &Dataset,
    center: &ParamVector,
    mu: f64,
    steps: usize,
    round: u64,
) -> Result<LocalUpdate> {
    let grad_at_center = model.gradient(center, data)?;
    let prox = ProximalObjective {
        base: model,
        center,
        mu,
    };
    let lr = profile.learning_rate;
    let mut w = center.clone();
    let mut g = ParamVector::zeros(center.len());
    let mut batch_rng = (profile.minibatch > 0)
        .then(|| RngStream::keyed(profile.seed, StreamRole::Minibatch, profile.device_id as u64, round).rng());
    let mut batch = Vec::with_capacity(profile.minibatch);
    let mut final_grad_ready = false;
    for s in 0..steps {
        match batch_rng.as_mut() {
            None if s == 0 => {
                // the proximal term vanishes at the center
                g.as_mut_slice().copy_from_slice(&grad_at_center);
            }
            None => {
                let f = model.loss_and_grad_on(&w, data, None, Some(g.as_mut_slice()))?;
                prox.add_proximal(&w, f, g.as_mut_slice());
            }
            Some(rng) => {
                batch.clear();
                batch.extend((0..profile.minibatch).map(|_| rng.random_range(0..data.len())));
                let f = model.loss_and_grad_on(&w, data, Some(&batch), Some(g.as_mut_slice()))?;
                prox.add_proximal(&w, f, g.as_mut_slice());
            }
        }
        w.axpy(-lr, &g);
        final_grad_ready = false;
    }
    if steps == 0 {
        g.as_mut_slice().copy_from_slice(&grad_at_center);
        final_grad_ready = true;
    }
    if !final_grad_ready {
        let f = model.loss_and_grad_on(&w, data, None, Some(g.as_mut_slice()))?;
        prox.add_proximal(&w, f, g.as_mut_slice());
    }
    let denom = grad_at_center.norm();
    let gamma = if denom == 0.0 { 0.0 } else { g.norm() / denom };
    if gamma > 1.0 + 1e-9 {
        log::warn!(
            "device {} round {round}: local solver increased the gradient norm (gamma = {gamma:.6})",
            profile.device_id
        );
    }
    let delta = w.sub(center);
    Ok(LocalUpdate {
        device_id: profile.device_id,
        w_next: w,
        delta,
        grad_at_center,
        gamma,
        steps,
        elapsed: profile.comm_delay + steps as f64 * profile.step_cost,
    })
}
