//! Finite tabular MDPs: representation, rollouts, exact evaluation and trajectory
//! enumeration.

mod envs;
mod trajectory;

pub use envs::{build_chain, build_gridworld, build_theorem3_env, build_zeroing_env, GridAction, Theorem3Construction};
pub use trajectory::{discounted_return, Step, Trajectory};

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::scalar::Scalar;

/// Default ceiling on the number of trajectories [`enumerate_trajectories`] will produce.
pub const DEFAULT_ENUMERATION_CAP: usize = 10_000_000;

/// A finite MDP with sparse transition rows.
///
/// Immutable once built; share it freely across worker threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp<S> {
    num_states: usize,
    num_actions: usize,
    /// Row `s * num_actions + a` lists `(next_state, probability)` with probability > 0.
    transitions: Vec<Vec<(usize, S)>>,
    reward: Vec<S>,
    gamma: S,
    initial: Vec<S>,
    terminal: Vec<bool>,
    horizon_cap: usize,
}

impl<S: Scalar> Mdp<S> {
    pub fn builder(num_states: usize, num_actions: usize) -> MdpBuilder<S> {
        MdpBuilder::new(num_states, num_actions)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> S {
        self.gamma
    }

    pub fn horizon_cap(&self) -> usize {
        self.horizon_cap
    }

    pub fn initial_dist(&self) -> &[S] {
        &self.initial
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn reward(&self, s: usize, a: usize) -> S {
        self.reward[s * self.num_actions + a]
    }

    /// Nonzero successors of `(s, a)`.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, S)] {
        &self.transitions[s * self.num_actions + a]
    }

    pub fn transition_prob(&self, s: usize, a: usize, next: usize) -> S {
        self.successors(s, a).iter().find(|&&(n, _)| n == next).map_or(S::zero(), |&(_, p)| p)
    }

    /// Roll out `policy` from `s0 ~ mu` until a terminal state or the horizon cap.
    pub fn sample_trajectory<P, R>(&self, policy: &P, rng: &mut R) -> Trajectory<S>
    where
        P: Policy<S> + ?Sized,
        R: Rng + ?Sized,
    {
        let mut state = sample_index(self.initial.iter().copied(), rng);
        let mut steps = Vec::new();
        while !self.terminal[state] && steps.len() < self.horizon_cap {
            let action = sample_index((0..self.num_actions).map(|a| policy.action_prob(state, a)), rng);
            let reward = self.reward(state, action);
            let next = {
                let row = self.successors(state, action);
                row[sample_index(row.iter().map(|&(_, p)| p), rng)].0
            };
            steps.push(Step { state, action, reward });
            state = next;
        }
        let truncated = !self.terminal[state] && steps.len() == self.horizon_cap;
        Trajectory { steps, final_state: state, truncated }
    }

    /// Expected discounted return of `policy` under the horizon cap, by backward induction.
    ///
    /// The recursion runs over exactly the capped process [`Mdp::sample_trajectory`]
    /// simulates, so it is exact for that process.
    pub fn exact_return<P: Policy<S> + ?Sized>(&self, policy: &P) -> S {
        let values = self.state_values(policy);
        let mut total = S::zero();
        for (s, &mu) in self.initial.iter().enumerate() {
            total += mu * values[s];
        }
        total
    }

    /// Value of every state with the full horizon remaining.
    pub fn state_values<P: Policy<S> + ?Sized>(&self, policy: &P) -> Vec<S> {
        let mut next = vec![S::zero(); self.num_states];
        let mut current = vec![S::zero(); self.num_states];
        for _ in 0..self.horizon_cap {
            for (s, cur) in current.iter_mut().enumerate() {
                if self.terminal[s] {
                    *cur = S::zero();
                    continue;
                }
                let mut v = S::zero();
                for a in 0..self.num_actions {
                    let pi = policy.action_prob(s, a);
                    if pi == S::zero() {
                        continue;
                    }
                    let mut future = S::zero();
                    for &(n, p) in self.successors(s, a) {
                        future += p * next[n];
                    }
                    v += pi * (self.reward(s, a) + self.gamma * future);
                }
                *cur = v;
            }
            std::mem::swap(&mut next, &mut current);
        }
        next
    }

    /// `log mu(s0) + sum_i [log pi(a_i|s_i) + log P(s_{i+1}|s_i,a_i)]`; `-inf` when any
    /// factor vanishes.
    pub fn trajectory_log_prob<P: Policy<S> + ?Sized>(&self, policy: &P, traj: &Trajectory<S>) -> S {
        let mut log_p = self.initial[traj.initial_state()].ln();
        for (i, step) in traj.steps.iter().enumerate() {
            log_p += policy.log_action_prob(step.state, step.action);
            log_p += self.transition_prob(step.state, step.action, traj.next_state(i)).ln();
        }
        log_p
    }

    pub fn trajectory_prob<P: Policy<S> + ?Sized>(&self, policy: &P, traj: &Trajectory<S>) -> S {
        self.trajectory_log_prob(policy, traj).exp()
    }

    /// Every dynamics-feasible trajectory of length at most `max_len` that ends in a
    /// terminal state or at `max_len`, each exactly once, in depth-first order.
    pub fn enumerate_trajectories(&self, max_len: usize, cap: usize) -> Result<Vec<Trajectory<S>>> {
        let mut out = Vec::new();
        let mut prefix = Vec::new();
        for (s0, &mu) in self.initial.iter().enumerate() {
            if mu > S::zero() {
                self.enumerate_from(s0, max_len, cap, &mut prefix, &mut out)?;
            }
        }
        Ok(out)
    }

    fn enumerate_from(
        &self,
        state: usize,
        max_len: usize,
        cap: usize,
        prefix: &mut Vec<Step<S>>,
        out: &mut Vec<Trajectory<S>>,
    ) -> Result<()> {
        if self.terminal[state] || prefix.len() == max_len {
            if out.len() == cap {
                return Err(Error::EnumerationCapExceeded { cap });
            }
            out.push(Trajectory { steps: prefix.clone(), final_state: state, truncated: !self.terminal[state] });
            return Ok(());
        }
        for action in 0..self.num_actions {
            let reward = self.reward(state, action);
            for &(next, _) in self.successors(state, action) {
                prefix.push(Step { state, action, reward });
                let res = self.enumerate_from(next, max_len, cap, prefix, out);
                prefix.pop();
                res?;
            }
        }
        Ok(())
    }

    /// [`Mdp::enumerate_trajectories`] paired with each trajectory's probability under `policy`.
    pub fn enumerate_with_probs<P: Policy<S> + ?Sized>(
        &self,
        policy: &P,
        max_len: usize,
        cap: usize,
    ) -> Result<Vec<(Trajectory<S>, S)>> {
        Ok(self
            .enumerate_trajectories(max_len, cap)?
            .into_iter()
            .map(|t| {
                let p = self.trajectory_prob(policy, &t);
                (t, p)
            })
            .collect())
    }

    /// Largest discounted return reachable from any initial state within the cap.
    pub fn max_achievable_return(&self) -> S {
        let mut next = vec![S::zero(); self.num_states];
        let mut current = vec![S::zero(); self.num_states];
        for _ in 0..self.horizon_cap {
            for (s, cur) in current.iter_mut().enumerate() {
                *cur = if self.terminal[s] {
                    S::zero()
                } else {
                    (0..self.num_actions)
                        .map(|a| {
                            let future: S = self.successors(s, a).iter().map(|&(n, p)| p * next[n]).sum();
                            self.reward(s, a) + self.gamma * future
                        })
                        .fold(S::neg_infinity(), S::max)
                };
            }
            std::mem::swap(&mut next, &mut current);
        }
        self.initial.iter().zip(&next).filter(|(&mu, _)| mu > S::zero()).map(|(_, &v)| v).fold(S::zero(), S::max)
    }
}

/// Draw an index from a (possibly unnormalized-by-rounding) probability vector.
pub(crate) fn sample_index<S, I, R>(probs: I, rng: &mut R) -> usize
where
    S: Scalar,
    I: IntoIterator<Item = S>,
    R: Rng + ?Sized,
{
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.into_iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

pub struct MdpBuilder<S> {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<Vec<(usize, S)>>,
    reward: Vec<S>,
    gamma: S,
    initial: Vec<S>,
    terminal: Vec<bool>,
    horizon_cap: usize,
}

impl<S: Scalar> MdpBuilder<S> {
    fn new(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            transitions: vec![Vec::new(); num_states * num_actions],
            reward: vec![S::zero(); num_states * num_actions],
            gamma: S::one(),
            initial: vec![S::zero(); num_states],
            terminal: vec![false; num_states],
            horizon_cap: 1,
        }
    }

    pub fn transition(mut self, s: usize, a: usize, next: usize, p: S) -> Self {
        let row = &mut self.transitions[s * self.num_actions + a];
        match row.iter_mut().find(|(n, _)| *n == next) {
            Some(entry) => entry.1 += p,
            None => row.push((next, p)),
        }
        self
    }

    pub fn reward(mut self, s: usize, a: usize, r: S) -> Self {
        self.reward[s * self.num_actions + a] = r;
        self
    }

    pub fn initial(mut self, s: usize, p: S) -> Self {
        self.initial[s] = p;
        self
    }

    pub fn terminal(mut self, s: usize) -> Self {
        self.terminal[s] = true;
        self
    }

    pub fn gamma(mut self, gamma: S) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn horizon_cap(mut self, h: usize) -> Self {
        self.horizon_cap = h;
        self
    }

    /// Validate and freeze. Terminal states without explicit rows get self-loops.
    pub fn build(mut self) -> Result<Mdp<S>> {
        let tol = S::normalization_tolerance();
        if self.num_states == 0 || self.num_actions == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if !(self.gamma > S::zero() && self.gamma <= S::one()) {
            return Err(Error::InvalidMdp(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.horizon_cap == 0 {
            return Err(Error::InvalidMdp("horizon_cap must be at least 1".into()));
        }
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = &mut self.transitions[s * self.num_actions + a];
                if row.is_empty() && self.terminal[s] {
                    row.push((s, S::one()));
                }
                row.retain(|&(_, p)| p != S::zero());
                if let Some(&(n, p)) = row.iter().find(|&&(n, p)| n >= self.num_states || p < S::zero()) {
                    return Err(Error::InvalidMdp(format!("transition ({s}, {a}) -> {n} has invalid entry {p}")));
                }
                let total: S = row.iter().map(|&(_, p)| p).sum();
                if (total - S::one()).abs() > tol {
                    return Err(Error::InvalidMdp(format!("transition row ({s}, {a}) sums to {total}")));
                }
            }
        }
        if self.initial.iter().any(|&p| p < S::zero()) {
            return Err(Error::InvalidMdp("negative initial probability".into()));
        }
        let mu_total: S = self.initial.iter().copied().sum();
        if (mu_total - S::one()).abs() > tol {
            return Err(Error::InvalidMdp(format!("initial distribution sums to {mu_total}")));
        }
        if self.reward.iter().any(|&r| !(r >= S::zero())) {
            return Err(Error::InvalidMdp("rewards must be nonnegative".into()));
        }
        let mdp = Mdp {
            num_states: self.num_states,
            num_actions: self.num_actions,
            transitions: self.transitions,
            reward: self.reward,
            gamma: self.gamma,
            initial: self.initial,
            terminal: self.terminal,
            horizon_cap: self.horizon_cap,
        };
        let best = mdp.max_achievable_return();
        if best > S::one() + tol {
            return Err(Error::InvalidMdp(format!("achievable discounted return {best} exceeds 1")));
        }
        Ok(mdp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ExplicitPolicy, TabularSoftmaxPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bandit(rewards: &[f64]) -> Mdp<f64> {
        let k = rewards.len();
        let mut b = Mdp::builder(2, k).initial(0, 1.0).terminal(1).horizon_cap(1);
        for (a, &r) in rewards.iter().enumerate() {
            b = b.transition(0, a, 1, 1.0).reward(0, a, r);
        }
        b.build().unwrap()
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let err = Mdp::<f64>::builder(2, 1).initial(0, 1.0).terminal(1).transition(0, 0, 1, 0.9).build().unwrap_err();
        assert!(matches!(err, Error::InvalidMdp(_)));
    }

    #[test]
    fn rejects_returns_above_one() {
        let err = Mdp::<f64>::builder(1, 1)
            .initial(0, 1.0)
            .transition(0, 0, 0, 1.0)
            .reward(0, 0, 0.6)
            .horizon_cap(2)
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::InvalidMdp(_)));
    }

    #[test]
    fn rejects_zero_horizon_and_bad_gamma() {
        let base = || Mdp::<f64>::builder(1, 1).initial(0, 1.0).transition(0, 0, 0, 1.0);
        assert!(base().horizon_cap(0).build().is_err());
        assert!(base().gamma(0.0).build().is_err());
        assert!(base().gamma(1.5).build().is_err());
    }

    #[test]
    fn terminal_after_one_step_gives_length_one() {
        let mdp = bandit(&[1.0]);
        let pi = ExplicitPolicy::uniform(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = mdp.sample_trajectory(&pi, &mut rng);
            assert_eq!(t.len(), 1);
            assert!(!t.truncated);
        }
    }

    #[test]
    fn truncation_flag_set_at_cap() {
        let mdp = Mdp::<f64>::builder(1, 1).initial(0, 1.0).transition(0, 0, 0, 1.0).horizon_cap(4).build().unwrap();
        let pi = ExplicitPolicy::uniform(1, 1);
        let t = mdp.sample_trajectory(&pi, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.len(), 4);
        assert!(t.truncated);
        assert_eq!(mdp.enumerate_trajectories(3, 10).unwrap().len(), 1);
    }

    #[test]
    fn bandit_enumeration_and_log_probs() {
        let mdp = bandit(&[1.0, 0.0]);
        let pi = ExplicitPolicy::uniform(2, 2);
        let all = mdp.enumerate_with_probs(&pi, 1, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(all.len(), 2);
        let total: f64 = all.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (t, _) in &all {
            assert!((mdp.trajectory_log_prob(&pi, t) - 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let mdp = bandit(&[1.0, 0.0, 0.0]);
        let err = mdp.enumerate_trajectories(1, 2).unwrap_err();
        assert_eq!(err, Error::EnumerationCapExceeded { cap: 2 });
    }

    #[test]
    fn deterministic_chain_deterministic_policy_has_log_prob_zero() {
        let mdp = Mdp::<f64>::builder(3, 1)
            .initial(0, 1.0)
            .transition(0, 0, 1, 1.0)
            .transition(1, 0, 2, 1.0)
            .terminal(2)
            .horizon_cap(5)
            .build()
            .unwrap();
        let pi = ExplicitPolicy::uniform(3, 1);
        let t = mdp.sample_trajectory(&pi, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(t.len(), 2);
        assert_eq!(mdp.trajectory_log_prob(&pi, &t), 0.0);
    }

    #[test]
    fn same_seed_same_rollout() {
        let mdp = build_chain::<f64>(3, 0.2, 8).unwrap();
        let pi = TabularSoftmaxPolicy::uniform(3, 2);
        let a = mdp.sample_trajectory(&pi, &mut ChaCha8Rng::seed_from_u64(42));
        let b = mdp.sample_trajectory(&pi, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn exact_return_matches_enumeration_oracle() {
        for mdp in [build_chain::<f64>(3, 0.2, 8).unwrap(), build_gridworld(3, false).unwrap()] {
            let pi = TabularSoftmaxPolicy::from_logits(
                crate::table::Table::from_vec(
                    mdp.num_states(),
                    mdp.num_actions(),
                    (0..mdp.num_states() * mdp.num_actions()).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect(),
                )
                .unwrap(),
            );
            // A short cap keeps the 3x3 enumeration small; rebuild with it.
            let h = mdp.horizon_cap().min(8);
            let capped = Mdp { horizon_cap: h, ..mdp.clone() };
            let all = capped.enumerate_with_probs(&pi, h, DEFAULT_ENUMERATION_CAP).unwrap();
            let total: f64 = all.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-9);
            let oracle: f64 = all.iter().map(|(t, p)| p * t.discounted_return(capped.gamma())).sum();
            assert!((capped.exact_return(&pi) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn empirical_frequencies_match_enumerated_probabilities() {
        let mdp = Mdp::<f64>::builder(2, 2)
            .initial(0, 1.0)
            .transition(0, 0, 0, 0.5)
            .transition(0, 0, 1, 0.5)
            .transition(0, 1, 1, 1.0)
            .terminal(1)
            .horizon_cap(3)
            .build()
            .unwrap();
        let pi = ExplicitPolicy::from_rows(&[vec![0.7, 0.3], vec![0.5, 0.5]]).unwrap();
        let all = mdp.enumerate_with_probs(&pi, 3, 1000).unwrap();
        let n = 100_000;
        let mut counts = vec![0usize; all.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..n {
            let t = mdp.sample_trajectory(&pi, &mut rng);
            let idx = all.iter().position(|(e, _)| *e == t).expect("sampled trajectory enumerated");
            counts[idx] += 1;
        }
        for ((_, p), c) in all.iter().zip(counts) {
            let freq = c as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
            assert!((freq - p).abs() <= 4.0 * se, "freq {freq} vs p {p}");
        }
    }
}
