use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{SampleStats, TheoremCheck};
use super::seeds::{nested_index, substream, Stream};
use super::{measure_reuse_bias, Algorithm, BiasExperiment, EnvSpec};
use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::estimators::epsilon2_loss;
use crate::mdp::{Mdp, Trajectory, DEFAULT_ENUMERATION_CAP};
use crate::optim::{train_stochastic_pg_visiting, LrSchedule, OptimConfig};
use crate::policy::TabularSoftmaxPolicy;
use crate::table::Table;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub buffer_size: usize,
    /// Learning rate, step count and schedule of the stochastic updates.
    pub optim: OptimConfig,
    pub n_algo_seeds: usize,
    pub n_buffer_pairs: usize,
    /// Algorithm seeds per pair whose full traces feed the `L1`/`L2` measurements.
    pub n_constant_seeds: usize,
    /// Buffers for the reuse-error estimate compared against `empirical_beta`.
    pub n_bias_seeds: usize,
    pub enumeration_cap: usize,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            buffer_size: 10,
            optim: OptimConfig {
                learning_rate: 1e-2,
                steps: 100,
                biris_alpha: 0.0,
                lr_schedule: LrSchedule::Constant,
                ..OptimConfig::default()
            },
            n_algo_seeds: 200,
            n_buffer_pairs: 200,
            n_constant_seeds: 4,
            n_bias_seeds: 10_000,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Max over pairs and enumerated trajectories of the seed-averaged probability gap.
    pub empirical_beta: f64,
    /// `(sum_k alpha_k) (2 + 2M) L1 L2` with the measured constants.
    pub theorem6_beta: f64,
    pub measured_m: f64,
    pub measured_l1: f64,
    pub measured_l2: f64,
    pub sum_learning_rates: f64,
    pub num_trajectories: usize,
    pub reuse_error: SampleStats,
    pub check: TheoremCheck,
}

/// Probability of every enumerated trajectory; dynamics factors are precomputed.
struct Enumeration {
    trajectories: Vec<Trajectory<f64>>,
    log_dynamics: Vec<f64>,
}

impl Enumeration {
    fn new(mdp: &Mdp<f64>, cap: usize) -> Result<Self> {
        let trajectories = mdp.enumerate_trajectories(mdp.horizon_cap(), cap)?;
        let log_dynamics = trajectories
            .iter()
            .map(|t| {
                let mut lp = mdp.initial_dist()[t.initial_state()].ln();
                for (i, st) in t.steps.iter().enumerate() {
                    lp += mdp.transition_prob(st.state, st.action, t.next_state(i)).ln();
                }
                lp
            })
            .collect();
        Ok(Self { trajectories, log_dynamics })
    }

    fn probs(&self, policy: &TabularSoftmaxPolicy<f64>) -> Vec<f64> {
        use crate::policy::Policy;
        self.trajectories
            .iter()
            .zip(&self.log_dynamics)
            .map(|(t, ld)| {
                let la: f64 = t.steps.iter().map(|s| policy.log_action_prob(s.state, s.action)).sum();
                (ld + la).exp()
            })
            .collect()
    }
}

/// Lipschitz measurements along one trace.
#[derive(Default)]
struct Constants {
    l1: f64,
    l2: f64,
}

impl Constants {
    fn observe(&mut self, enumeration: &Enumeration, policy: &TabularSoftmaxPolicy<f64>, probs: &[f64]) {
        let mut g = Table::zeros(policy.logits().rows(), policy.logits().cols());
        for (t, &p) in enumeration.trajectories.iter().zip(probs) {
            g.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
            policy.add_grad_log_traj(t, 1.0, &mut g);
            let n = g.norm();
            self.l1 = self.l1.max(n);
            self.l2 = self.l2.max(p * n);
        }
    }

    fn observe_secant(&mut self, prev: &[f64], next: &[f64], dist: f64) {
        if dist > 0.0 {
            for (a, b) in prev.iter().zip(next) {
                self.l2 = self.l2.max((a - b).abs() / dist);
            }
        }
    }
}

struct RunOutcome {
    final_probs: Vec<f64>,
    max_penalty: f64,
    constants: Option<Constants>,
}

fn run<R: Rng>(
    enumeration: &Enumeration,
    buffer: &ReplayBuffer<f64>,
    init: &TabularSoftmaxPolicy<f64>,
    optim: &OptimConfig,
    rng: &mut R,
    measure_constants: bool,
) -> Result<RunOutcome> {
    let mut constants = measure_constants.then(Constants::default);
    let mut prev: Option<(Table<f64>, Vec<f64>)> = None;
    let mut max_penalty = 0.0f64;
    let (policy, _) = train_stochastic_pg_visiting(buffer, init, optim, rng, |_, theta| {
        max_penalty = max_penalty.max(epsilon2_loss(theta, buffer));
        if let Some(c) = constants.as_mut() {
            let probs = enumeration.probs(theta);
            c.observe(enumeration, theta, &probs);
            if let Some((logits, p)) = &prev {
                c.observe_secant(p, &probs, logits.distance(theta.logits()));
            }
            prev = Some((theta.logits().clone(), probs));
        }
    })?;
    Ok(RunOutcome { final_probs: enumeration.probs(&policy), max_penalty, constants })
}

/// Empirical uniform stability of the stochastic off-policy gradient against the constant
/// implied by the measured `M`, `L1`, `L2`.
///
/// Each pair is a buffer and a copy with one uniformly chosen trajectory replaced by an
/// independent fresh rollout. Both buffers are trained under the same algorithm seeds.
/// `M` is the largest `L(pi, B)` seen at any iterate of any run; `L1`, `L2` are the largest
/// `|grad log p(tau)|` and `p(tau) |grad log p(tau)|` (or secant slope of `p(tau)`) over
/// enumerated trajectories at the iterates of the first `n_constant_seeds` seeds per pair.
pub fn stability_probe(
    env: EnvSpec,
    behavior: Option<TabularSoftmaxPolicy<f64>>,
    config: &StabilityConfig,
    master_seed: u64,
) -> Result<StabilityReport> {
    if config.n_algo_seeds == 0 || config.n_buffer_pairs == 0 {
        return Err(Error::domain("stability", "need at least one pair and one algorithm seed"));
    }
    config.optim.validate()?;
    let mdp = env.build()?;
    let behavior = behavior.unwrap_or_else(|| TabularSoftmaxPolicy::uniform(mdp.num_states(), mdp.num_actions()));
    let enumeration = Enumeration::new(&mdp, config.enumeration_cap)?;
    let m = config.buffer_size;

    let pairs = (0..config.n_buffer_pairs as u64)
        .into_par_iter()
        .map(|j| {
            let mut brng = substream(master_seed, Stream::Buffer, j);
            let b = ReplayBuffer::sample(&mdp, behavior.clone().into(), m, &mut brng)?;
            let mut prng = substream(master_seed, Stream::Pair, j);
            let idx = prng.random_range(0..m);
            let b2 = b.with_replaced(idx, mdp.sample_trajectory(&behavior, &mut prng))?;
            let mut diff = vec![0.0; enumeration.trajectories.len()];
            let (mut max_m, mut l1, mut l2) = (0.0f64, 0.0f64, 0.0f64);
            for s in 0..config.n_algo_seeds as u64 {
                let measure = (s as usize) < config.n_constant_seeds;
                let seed = nested_index(j, s);
                let r1 = run(
                    &enumeration,
                    &b,
                    &behavior,
                    &config.optim,
                    &mut substream(master_seed, Stream::Algorithm, seed),
                    measure,
                )?;
                let r2 = run(
                    &enumeration,
                    &b2,
                    &behavior,
                    &config.optim,
                    &mut substream(master_seed, Stream::Algorithm, seed),
                    measure,
                )?;
                for ((d, p1), p2) in diff.iter_mut().zip(&r1.final_probs).zip(&r2.final_probs) {
                    *d += p1 - p2;
                }
                max_m = max_m.max(r1.max_penalty).max(r2.max_penalty);
                for c in [r1.constants, r2.constants].into_iter().flatten() {
                    l1 = l1.max(c.l1);
                    l2 = l2.max(c.l2);
                }
            }
            let n = config.n_algo_seeds as f64;
            let beta = diff.iter().map(|d| (d / n).abs()).fold(0.0, f64::max);
            Ok((beta, max_m, l1, l2))
        })
        .collect::<Result<Vec<_>>>()?;

    let fold = |f: fn(&(f64, f64, f64, f64)) -> f64| pairs.iter().map(f).fold(0.0, f64::max);
    let empirical_beta = fold(|p| p.0);
    let measured_m = fold(|p| p.1);
    let measured_l1 = fold(|p| p.2);
    let measured_l2 = fold(|p| p.3);
    let sum_learning_rates: f64 =
        (0..config.optim.steps).map(|k| config.optim.lr_schedule.rate(config.optim.learning_rate, k)).sum();
    let theorem6_beta = sum_learning_rates * (2.0 + 2.0 * measured_m) * measured_l1 * measured_l2;

    let mut exp = BiasExperiment::new(env, Algorithm::StochasticPg, m, config.n_bias_seeds, master_seed)?;
    exp.behavior = behavior;
    exp.optim = config.optim.clone();
    let reuse_error = measure_reuse_bias(&exp)?.summary.reuse_error;

    let mut check = TheoremCheck::new("stability");
    check
        .stat("empirical_beta", empirical_beta)
        .stat("theorem6_beta", theorem6_beta)
        .stat("measured_M", measured_m)
        .stat("measured_L1", measured_l1)
        .stat("measured_L2", measured_l2)
        .stat("sum_learning_rates", sum_learning_rates)
        .stats("reuse_error", &reuse_error)
        .require("empirical_beta <= theorem6_beta", empirical_beta <= theorem6_beta)
        .require(
            "|mean reuse_error| <= empirical_beta + 4 SE",
            reuse_error.mean.abs() <= empirical_beta + 4.0 * reuse_error.std_error,
        );
    Ok(StabilityReport {
        empirical_beta,
        theorem6_beta,
        measured_m,
        measured_l1,
        measured_l2,
        sum_learning_rates,
        num_trajectories: enumeration.trajectories.len(),
        reuse_error,
        check,
    })
}
