//! Tabular policies, score functions and trajectory probability ratios.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::mdp::Trajectory;
use crate::scalar::{log_sum_exp, Scalar};
use crate::table::Table;

/// Anything that yields `pi(a|s)` on a finite state-action space.
pub trait Policy<S: Scalar> {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn action_prob(&self, s: usize, a: usize) -> S;

    /// `-inf` for an exact zero.
    fn log_action_prob(&self, s: usize, a: usize) -> S {
        self.action_prob(s, a).ln()
    }
}

/// Softmax over a logit table. Log-probabilities are cached and refreshed on every
/// mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmaxPolicy<S> {
    logits: Table<S>,
    log_probs: Table<S>,
}

impl<S: Scalar> TabularSoftmaxPolicy<S> {
    pub fn from_logits(logits: Table<S>) -> Self {
        let mut policy = Self { log_probs: logits.clone(), logits };
        policy.refresh();
        policy
    }

    /// Zero logits.
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self::from_logits(Table::zeros(num_states, num_actions))
    }

    pub fn logits(&self) -> &Table<S> {
        &self.logits
    }

    pub fn set_logits(&mut self, logits: Table<S>) {
        assert!(logits.same_shape(&self.logits), "logit table shape changed");
        self.logits = logits;
        self.refresh();
    }

    /// `theta += step * direction`.
    pub fn step(&mut self, direction: &Table<S>, step: S) {
        self.logits.add_scaled(direction, step);
        self.refresh();
    }

    /// Copy with a single logit moved by `delta`.
    pub fn perturbed(&self, s: usize, a: usize, delta: S) -> Self {
        let mut logits = self.logits.clone();
        logits[(s, a)] += delta;
        Self::from_logits(logits)
    }

    pub fn probs_row(&self, s: usize) -> Vec<S> {
        self.log_probs.row(s).iter().map(|l| l.exp()).collect()
    }

    fn refresh(&mut self) {
        for s in 0..self.logits.rows() {
            let lse = log_sum_exp(self.logits.row(s));
            let (src, dst) = (self.logits.row(s).to_vec(), self.log_probs.row_mut(s));
            for (d, l) in dst.iter_mut().zip(src) {
                *d = l - lse;
            }
        }
    }

    /// Score function `d log pi(a|s) / d theta`: row `s` holds `1{a'=a} - pi(a'|s)`.
    pub fn grad_log_prob(&self, s: usize, a: usize) -> Table<S> {
        let mut g = Table::zeros(self.logits.rows(), self.logits.cols());
        self.add_grad_log_prob(s, a, S::one(), &mut g);
        g
    }

    /// `out += scale * grad_log_prob(s, a)` without allocating.
    pub fn add_grad_log_prob(&self, s: usize, a: usize, scale: S, out: &mut Table<S>) {
        let row = out.row_mut(s);
        for (b, (o, &lp)) in row.iter_mut().zip(self.log_probs.row(s)).enumerate() {
            let indicator = if b == a { S::one() } else { S::zero() };
            *o += scale * (indicator - lp.exp());
        }
    }

    /// `out += scale * grad log p^pi(traj)`; dynamics terms do not depend on the logits.
    pub fn add_grad_log_traj(&self, traj: &Trajectory<S>, scale: S, out: &mut Table<S>) {
        for step in &traj.steps {
            self.add_grad_log_prob(step.state, step.action, scale, out);
        }
    }

    pub fn grad_log_traj(&self, traj: &Trajectory<S>) -> Table<S> {
        let mut g = Table::zeros(self.logits.rows(), self.logits.cols());
        self.add_grad_log_traj(traj, S::one(), &mut g);
        g
    }
}

impl<S: Scalar> Policy<S> for TabularSoftmaxPolicy<S> {
    fn num_states(&self) -> usize {
        self.logits.rows()
    }

    fn num_actions(&self) -> usize {
        self.logits.cols()
    }

    fn action_prob(&self, s: usize, a: usize) -> S {
        self.log_probs[(s, a)].exp()
    }

    fn log_action_prob(&self, s: usize, a: usize) -> S {
        self.log_probs[(s, a)]
    }
}

/// Explicit probability table; may hold exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitPolicy<S> {
    probs: Table<S>,
}

impl<S: Scalar> ExplicitPolicy<S> {
    pub fn new(probs: Table<S>) -> Result<Self> {
        let tol = S::normalization_tolerance();
        for s in 0..probs.rows() {
            let row = probs.row(s);
            if row.iter().any(|&p| !(p >= S::zero())) {
                return Err(Error::InvalidPolicy(format!("row {s} has a negative or NaN entry")));
            }
            let total: S = row.iter().copied().sum();
            if (total - S::one()).abs() > tol {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {total}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        Self::new(Table::from_rows(rows)?)
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self { probs: Table::filled(num_states, num_actions, S::one() / S::from_count(num_actions)) }
    }

    pub fn from_policy<P: Policy<S> + ?Sized>(policy: &P) -> Self {
        let mut probs = Table::zeros(policy.num_states(), policy.num_actions());
        for s in 0..policy.num_states() {
            for a in 0..policy.num_actions() {
                probs[(s, a)] = policy.action_prob(s, a);
            }
        }
        Self { probs }
    }

    pub fn probs(&self) -> &Table<S> {
        &self.probs
    }
}

impl<S: Scalar> Policy<S> for ExplicitPolicy<S> {
    fn num_states(&self) -> usize {
        self.probs.rows()
    }

    fn num_actions(&self) -> usize {
        self.probs.cols()
    }

    fn action_prob(&self, s: usize, a: usize) -> S {
        self.probs[(s, a)]
    }
}

/// Either policy representation, for places that store snapshots of mixed kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySnapshot<S> {
    Softmax(TabularSoftmaxPolicy<S>),
    Explicit(ExplicitPolicy<S>),
}

impl<S: Scalar> Policy<S> for PolicySnapshot<S> {
    fn num_states(&self) -> usize {
        match self {
            Self::Softmax(p) => p.num_states(),
            Self::Explicit(p) => p.num_states(),
        }
    }

    fn num_actions(&self) -> usize {
        match self {
            Self::Softmax(p) => p.num_actions(),
            Self::Explicit(p) => p.num_actions(),
        }
    }

    fn action_prob(&self, s: usize, a: usize) -> S {
        match self {
            Self::Softmax(p) => p.action_prob(s, a),
            Self::Explicit(p) => p.action_prob(s, a),
        }
    }

    fn log_action_prob(&self, s: usize, a: usize) -> S {
        match self {
            Self::Softmax(p) => p.log_action_prob(s, a),
            Self::Explicit(p) => p.log_action_prob(s, a),
        }
    }
}

impl<S> From<TabularSoftmaxPolicy<S>> for PolicySnapshot<S> {
    fn from(p: TabularSoftmaxPolicy<S>) -> Self {
        Self::Softmax(p)
    }
}

impl<S> From<ExplicitPolicy<S>> for PolicySnapshot<S> {
    fn from(p: ExplicitPolicy<S>) -> Self {
        Self::Explicit(p)
    }
}

/// `sum_i log pi(a_i|s_i)` over a trajectory; the policy-dependent part of `log p^pi(traj)`.
pub fn action_log_prob_sum<S: Scalar, P: Policy<S> + ?Sized>(policy: &P, traj: &Trajectory<S>) -> S {
    traj.steps.iter().map(|st| policy.log_action_prob(st.state, st.action)).sum()
}

/// `p^target(traj) / p^behavior(traj) = prod_i target(a_i|s_i) / behavior(a_i|s_i)`,
/// accumulated in log space.
pub fn ratio_traj<S, T, B>(target: &T, behavior: &B, traj: &Trajectory<S>) -> Result<S>
where
    S: Scalar,
    T: Policy<S> + ?Sized,
    B: Policy<S> + ?Sized,
{
    let mut log_ratio = S::zero();
    for step in &traj.steps {
        let lb = behavior.log_action_prob(step.state, step.action);
        if lb == S::neg_infinity() {
            return Err(Error::ZeroBehaviorProbability { state: step.state, action: step.action });
        }
        log_ratio += target.log_action_prob(step.state, step.action) - lb;
    }
    Ok(log_ratio.exp())
}

/// Policy that puts zero mass on every action the buffer recorded in a state and
/// renormalizes the behavior probabilities over the rest.
///
/// The last surviving action of each row absorbs the rounding residue, so the row sums
/// to exactly one when added in action order.
pub fn zeroing_policy<S: Scalar>(behavior: &ExplicitPolicy<S>, buffer: &ReplayBuffer<S>) -> Result<ExplicitPolicy<S>> {
    let mut seen = vec![vec![false; behavior.num_actions()]; behavior.num_states()];
    for traj in buffer.trajectories() {
        for step in &traj.steps {
            seen[step.state][step.action] = true;
        }
    }
    let mut probs = behavior.probs.clone();
    for (s, seen_row) in seen.iter().enumerate() {
        if !seen_row.iter().any(|&x| x) {
            continue;
        }
        let survivors: Vec<usize> =
            (0..behavior.num_actions()).filter(|&a| !seen_row[a] && behavior.action_prob(s, a) > S::zero()).collect();
        let Some((&last, rest)) = survivors.split_last() else {
            return Err(Error::AllActionsSampled { state: s });
        };
        let mass: S = survivors.iter().map(|&a| behavior.action_prob(s, a)).sum();
        let row = probs.row_mut(s);
        row.iter_mut().for_each(|p| *p = S::zero());
        let mut partial = S::zero();
        for &a in rest {
            row[a] = behavior.action_prob(s, a) / mass;
            partial += row[a];
        }
        row[last] = S::one() - partial;
    }
    ExplicitPolicy::new(probs)
}

/// `k` softmax policies with i.i.d. standard normal logits.
pub fn random_policy_set<S: Scalar, R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<TabularSoftmaxPolicy<S>>> {
    if k == 0 {
        return Err(Error::domain("K", "hypothesis set must be nonempty"));
    }
    Ok((0..k)
        .map(|_| {
            let logits = (0..num_states * num_actions).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect();
            TabularSoftmaxPolicy::from_logits(
                Table::from_vec(num_states, num_actions, logits).expect("sized by construction"),
            )
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct SoftmaxRepr<S> {
    states: usize,
    actions: usize,
    logits: Vec<Vec<S>>,
}

#[derive(Serialize, Deserialize)]
struct ExplicitRepr<S> {
    states: usize,
    actions: usize,
    probs: Vec<Vec<S>>,
}

impl<S: Scalar> Serialize for TabularSoftmaxPolicy<S> {
    fn serialize<Z: serde::Serializer>(&self, ser: Z) -> std::result::Result<Z::Ok, Z::Error> {
        SoftmaxRepr { states: self.num_states(), actions: self.num_actions(), logits: self.logits.to_rows() }
            .serialize(ser)
    }
}

impl<'de, S: Scalar> Deserialize<'de> for TabularSoftmaxPolicy<S> {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = SoftmaxRepr::<S>::deserialize(de)?;
        let table = Table::from_rows(&repr.logits).map_err(serde::de::Error::custom)?;
        if table.rows() != repr.states || table.cols() != repr.actions {
            return Err(serde::de::Error::custom("logit table does not match states/actions"));
        }
        Ok(Self::from_logits(table))
    }
}

impl<S: Scalar> Serialize for ExplicitPolicy<S> {
    fn serialize<Z: serde::Serializer>(&self, ser: Z) -> std::result::Result<Z::Ok, Z::Error> {
        ExplicitRepr { states: self.num_states(), actions: self.num_actions(), probs: self.probs.to_rows() }
            .serialize(ser)
    }
}

impl<'de, S: Scalar> Deserialize<'de> for ExplicitPolicy<S> {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = ExplicitRepr::<S>::deserialize(de)?;
        let table = Table::from_rows(&repr.probs).map_err(serde::de::Error::custom)?;
        if table.rows() != repr.states || table.cols() != repr.actions {
            return Err(serde::de::Error::custom("probability table does not match states/actions"));
        }
        Self::new(table).map_err(serde::de::Error::custom)
    }
}
