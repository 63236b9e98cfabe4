//! Off-policy return estimators, the buffer-ratio penalties and the bound evaluators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::mdp::Mdp;
use crate::policy::{action_log_prob_sum, Policy};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Ordinary importance sampling, `(1/m) sum w_i R_i`.
    Is,
    /// Self-normalized importance sampling, `sum w_i R_i / sum w_i`.
    Wis,
}

/// An estimate together with the per-trajectory pieces it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateBreakdown<S> {
    pub estimator: EstimatorKind,
    pub value: S,
    pub per_trajectory_weights: Vec<S>,
    pub per_trajectory_returns: Vec<S>,
}

impl<S: Scalar> EstimateBreakdown<S> {
    /// Re-derive `value` from the stored weights and returns.
    pub fn recompute(&self) -> S {
        let weighted: S =
            self.per_trajectory_weights.iter().zip(&self.per_trajectory_returns).map(|(&w, &r)| w * r).sum();
        match self.estimator {
            EstimatorKind::Is => weighted / S::from_count(self.per_trajectory_weights.len()),
            EstimatorKind::Wis => weighted / self.per_trajectory_weights.iter().copied().sum::<S>(),
        }
    }
}

pub fn is_estimate<S: Scalar, P: Policy<S> + ?Sized>(buffer: &ReplayBuffer<S>, target: &P) -> EstimateBreakdown<S> {
    let mut b = EstimateBreakdown {
        estimator: EstimatorKind::Is,
        value: S::zero(),
        per_trajectory_weights: buffer.weights(target),
        per_trajectory_returns: buffer.returns().to_vec(),
    };
    b.value = b.recompute();
    b
}

pub fn wis_estimate<S: Scalar, P: Policy<S> + ?Sized>(
    buffer: &ReplayBuffer<S>,
    target: &P,
) -> Result<EstimateBreakdown<S>> {
    let weights = buffer.weights(target);
    if weights.iter().all(|&w| w == S::zero()) {
        return Err(Error::AllWeightsZero);
    }
    let mut b = EstimateBreakdown {
        estimator: EstimatorKind::Wis,
        value: S::zero(),
        per_trajectory_weights: weights,
        per_trajectory_returns: buffer.returns().to_vec(),
    };
    b.value = b.recompute();
    Ok(b)
}

pub fn estimate<S: Scalar, P: Policy<S> + ?Sized>(
    kind: EstimatorKind,
    buffer: &ReplayBuffer<S>,
    target: &P,
) -> Result<EstimateBreakdown<S>> {
    match kind {
        EstimatorKind::Is => Ok(is_estimate(buffer, target)),
        EstimatorKind::Wis => wis_estimate(buffer, target),
    }
}

/// Mean absolute deviation of the trajectory ratios from one over the buffer.
///
/// This is the buffer-side term of the high-probability reuse-error bound and the
/// bias-regularization penalty `L(pi, B)`.
pub fn epsilon2_loss<S: Scalar, P: Policy<S> + ?Sized>(target: &P, buffer: &ReplayBuffer<S>) -> S {
    let total: S = buffer.weights(target).into_iter().map(|w| (S::one() - w).abs()).sum();
    total / S::from_count(buffer.len())
}

/// Mean over every recorded (state, action) pair of `|pi(a|s) / behavior(a|s) - 1|`.
pub fn l_br_loss<S: Scalar, P: Policy<S> + ?Sized>(target: &P, buffer: &ReplayBuffer<S>) -> S {
    let mut total = S::zero();
    let mut count = 0usize;
    for (i, traj) in buffer.trajectories().iter().enumerate() {
        let behavior = buffer.behavior(i);
        for step in &traj.steps {
            let ratio = (target.log_action_prob(step.state, step.action)
                - behavior.log_action_prob(step.state, step.action))
            .exp();
            total += (ratio - S::one()).abs();
            count += 1;
        }
    }
    if count == 0 {
        S::zero()
    } else {
        total / S::from_count(count)
    }
}

/// `KL(p^target || p^behavior)` over trajectories, by enumeration. Infinite when the
/// behavior misses part of the target's support.
pub fn kl_trajectory_exact<S, T, B>(mdp: &Mdp<S>, target: &T, behavior: &B, max_len: usize, cap: usize) -> Result<S>
where
    S: Scalar,
    T: Policy<S> + ?Sized,
    B: Policy<S> + ?Sized,
{
    let mut kl = S::zero();
    for traj in mdp.enumerate_trajectories(max_len, cap)? {
        let log_pt = mdp.trajectory_log_prob(target, &traj);
        if log_pt == S::neg_infinity() {
            continue;
        }
        let log_ratio = action_log_prob_sum(target, &traj) - action_log_prob_sum(behavior, &traj);
        if log_ratio == S::infinity() {
            return Ok(S::infinity());
        }
        kl += log_pt.exp() * log_ratio;
    }
    Ok(kl.max(S::zero()))
}

/// Monte Carlo `KL(p^target || p^behavior)` from fresh target rollouts.
/// Returns `(estimate, standard error)`.
pub fn kl_trajectory_mc<S, T, B, R>(
    mdp: &Mdp<S>,
    target: &T,
    behavior: &B,
    n_samples: usize,
    rng: &mut R,
) -> Result<(S, S)>
where
    S: Scalar,
    T: Policy<S> + ?Sized,
    B: Policy<S> + ?Sized,
    R: Rng + ?Sized,
{
    if n_samples < 2 {
        return Err(Error::domain("n_samples", "need at least 2 samples"));
    }
    let mut sum = S::zero();
    let mut sum_sq = S::zero();
    for _ in 0..n_samples {
        let traj = mdp.sample_trajectory(target, rng);
        let lr = action_log_prob_sum(target, &traj) - action_log_prob_sum(behavior, &traj);
        if lr == S::infinity() {
            return Ok((S::infinity(), S::infinity()));
        }
        sum += lr;
        sum_sq += lr * lr;
    }
    let n = S::from_count(n_samples);
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - S::one())).max(S::zero());
    Ok((mean, (var / n).sqrt()))
}

/// Inputs of the high-probability reuse-error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs<S> {
    /// Trajectory-space KL between the trained and the behavior policy.
    pub eps1: S,
    /// Mean absolute ratio deviation on the buffer.
    pub eps2: S,
    pub m: usize,
    pub delta: S,
}

/// `sqrt((m eps1 + log(m^2 / delta)) / (m - 1)) + eps2`.
pub fn reuse_error_bound<S: Scalar>(inputs: &BoundInputs<S>) -> Result<S> {
    let BoundInputs { eps1, eps2, m, delta } = *inputs;
    if m < 2 {
        return Err(Error::domain("m", format!("bound needs m >= 2, got {m}")));
    }
    if !(delta > S::zero() && delta < S::one()) {
        return Err(Error::domain("delta", format!("{delta} outside (0, 1)")));
    }
    if !(eps1 >= S::zero()) || !(eps2 >= S::zero()) {
        return Err(Error::domain("eps", "eps1 and eps2 must be nonnegative"));
    }
    let m_s = S::from_count(m);
    Ok(((m_s * eps1 + (m_s * m_s / delta).ln()) / (m_s - S::one())).sqrt() + eps2)
}

/// Hoeffding plus union bound over a finite hypothesis set:
/// `sqrt(rho_max^2 / (2m) * ln(2 |H| / delta))`.
pub fn finite_hypothesis_bound<S: Scalar>(m: usize, h_size: usize, delta: S, rho_max: S) -> Result<S> {
    if m < 1 {
        return Err(Error::domain("m", "need m >= 1"));
    }
    if h_size < 1 {
        return Err(Error::domain("h_size", "need a nonempty hypothesis set"));
    }
    if !(delta > S::zero() && delta < S::one()) {
        return Err(Error::domain("delta", format!("{delta} outside (0, 1)")));
    }
    if !(rho_max >= S::one()) {
        return Err(Error::domain("rho_max", format!("{rho_max} < 1")));
    }
    let two = S::lit(2.0);
    Ok((rho_max * rho_max / (two * S::from_count(m)) * (two * S::from_count(h_size) / delta).ln()).sqrt())
}

/// Worst-case `|prod_t rho_t - 1|` when every per-step ratio lies in `[1 - eps, 1 + eps]`:
/// `max(1 - (1 - eps)^T, (1 + eps)^T - 1)`.
pub fn product_ratio_bound<S: Scalar>(eps: S, horizon: usize) -> Result<S> {
    if !(eps >= S::zero() && eps < S::one()) {
        return Err(Error::domain("eps", format!("{eps} outside [0, 1)")));
    }
    let t = horizon as i32;
    Ok((S::one() - (S::one() - eps).powi(t)).max((S::one() + eps).powi(t) - S::one()))
}

/// Per-pair ratio with the behavior log-probability clipped into `[beta_clip, 0]`.
pub fn sac_ratio<S: Scalar>(log_p_target: S, log_p_behavior: S, beta_clip: S) -> S {
    (log_p_target - log_p_behavior.max(beta_clip).min(S::zero())).exp()
}

/// Ratio of two isotropic Gaussians with shared scale evaluated at `action`:
/// `exp((|a - mu_b|^2 - |a - mu_t|^2) / (2 scale^2))`. `scale = 1` is the unit-covariance
/// form.
pub fn gaussian_ratio<S: Scalar>(action: &[S], mean_target: &[S], mean_behavior: &[S], scale: S) -> Result<S> {
    if action.len() != mean_target.len() || action.len() != mean_behavior.len() {
        return Err(Error::ShapeMismatch(format!(
            "action has {} dims, target mean {}, behavior mean {}",
            action.len(),
            mean_target.len(),
            mean_behavior.len()
        )));
    }
    if !(scale > S::zero()) {
        return Err(Error::domain("scale", "must be positive"));
    }
    let sq = |mean: &[S]| -> S { action.iter().zip(mean).map(|(&a, &m)| (a - m) * (a - m)).sum() };
    let half = S::lit(0.5);
    Ok((half * (sq(mean_behavior) - sq(mean_target)) / (scale * scale)).exp())
}
