//! Replay buffers: trajectories plus the behavior snapshot that generated each one.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{Mdp, Trajectory};
use crate::policy::{action_log_prob_sum, Policy, PolicySnapshot};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer<S> {
    trajectories: Vec<Trajectory<S>>,
    behaviors: Vec<PolicySnapshot<S>>,
    behavior_of: Vec<usize>,
    /// `sum_t log behavior(a_t|s_t)` per trajectory.
    behavior_log_probs: Vec<S>,
    returns: Vec<S>,
    gamma: S,
}

impl<S: Scalar> ReplayBuffer<S> {
    /// All trajectories generated by one behavior policy.
    pub fn shared(trajectories: Vec<Trajectory<S>>, behavior: PolicySnapshot<S>, gamma: S) -> Result<Self> {
        let n = trajectories.len();
        Self::from_parts(trajectories, vec![behavior], vec![0; n], gamma)
    }

    /// One behavior snapshot per trajectory.
    pub fn per_trajectory(
        trajectories: Vec<Trajectory<S>>,
        behaviors: Vec<PolicySnapshot<S>>,
        gamma: S,
    ) -> Result<Self> {
        if behaviors.len() != trajectories.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} trajectories but {} behavior snapshots",
                trajectories.len(),
                behaviors.len()
            )));
        }
        let idx = (0..behaviors.len()).collect();
        Self::from_parts(trajectories, behaviors, idx, gamma)
    }

    fn from_parts(
        trajectories: Vec<Trajectory<S>>,
        behaviors: Vec<PolicySnapshot<S>>,
        behavior_of: Vec<usize>,
        gamma: S,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut behavior_log_probs = Vec::with_capacity(trajectories.len());
        for (traj, &b) in trajectories.iter().zip(&behavior_of) {
            let behavior = &behaviors[b];
            if let Some(step) = traj.steps.iter().find(|st| !(behavior.action_prob(st.state, st.action) > S::zero())) {
                return Err(Error::ZeroBehaviorProbability { state: step.state, action: step.action });
            }
            behavior_log_probs.push(action_log_prob_sum(behavior, traj));
        }
        let returns = trajectories.iter().map(|t| t.discounted_return(gamma)).collect();
        Ok(Self { trajectories, behaviors, behavior_of, behavior_log_probs, returns, gamma })
    }

    /// `m` independent rollouts of `behavior`.
    pub fn sample<R: Rng + ?Sized>(mdp: &Mdp<S>, behavior: PolicySnapshot<S>, m: usize, rng: &mut R) -> Result<Self> {
        let trajectories = (0..m).map(|_| mdp.sample_trajectory(&behavior, rng)).collect();
        Self::shared(trajectories, behavior, mdp.gamma())
    }

    /// Copy with trajectory `i` swapped for `traj` (same behavior snapshot).
    pub fn with_replaced(&self, i: usize, traj: Trajectory<S>) -> Result<Self> {
        let mut trajectories = self.trajectories.clone();
        trajectories[i] = traj;
        Self::from_parts(trajectories, self.behaviors.clone(), self.behavior_of.clone(), self.gamma)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory<S>] {
        &self.trajectories
    }

    pub fn returns(&self) -> &[S] {
        &self.returns
    }

    pub fn gamma(&self) -> S {
        self.gamma
    }

    pub fn behavior(&self, i: usize) -> &PolicySnapshot<S> {
        &self.behaviors[self.behavior_of[i]]
    }

    pub fn behavior_log_prob(&self, i: usize) -> S {
        self.behavior_log_probs[i]
    }

    /// True when every trajectory shares one behavior snapshot.
    pub fn is_shared(&self) -> bool {
        self.behaviors.len() == 1
    }

    /// `log(p^target(tau_i) / p^behavior(tau_i))`.
    pub fn log_ratio<P: Policy<S> + ?Sized>(&self, target: &P, i: usize) -> S {
        action_log_prob_sum(target, &self.trajectories[i]) - self.behavior_log_probs[i]
    }

    /// Importance weight of every trajectory under `target`.
    pub fn weights<P: Policy<S> + ?Sized>(&self, target: &P) -> Vec<S> {
        (0..self.len()).map(|i| self.log_ratio(target, i).exp()).collect()
    }
}
