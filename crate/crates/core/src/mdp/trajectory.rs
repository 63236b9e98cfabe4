use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step<S> {
    pub state: usize,
    pub action: usize,
    pub reward: S,
}

/// One rollout: the visited (state, action, reward) triples plus the state the last
/// transition landed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S> {
    pub steps: Vec<Step<S>>,
    pub final_state: usize,
    /// Set when the horizon cap, not a terminal state, ended the rollout.
    pub truncated: bool,
}

impl<S: Scalar> Trajectory<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn initial_state(&self) -> usize {
        self.steps.first().map_or(self.final_state, |s| s.state)
    }

    /// State reached after step `i`.
    pub fn next_state(&self, i: usize) -> usize {
        self.steps.get(i + 1).map_or(self.final_state, |s| s.state)
    }

    pub fn discounted_return(&self, gamma: S) -> S {
        discounted_return(self, gamma)
    }
}

/// `sum_t gamma^t r_t`.
pub fn discounted_return<S: Scalar>(traj: &Trajectory<S>, gamma: S) -> S {
    let mut discount = S::one();
    let mut total = S::zero();
    for step in &traj.steps {
        total += discount * step.reward;
        discount *= gamma;
    }
    total
}
