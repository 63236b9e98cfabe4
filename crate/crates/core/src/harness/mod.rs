//! Seeded Monte Carlo experiments over replay buffers, in `f64`.
//!
//! Every experiment is a pure function of its inputs and a master seed. Per-seed work runs
//! on the current rayon pool and is collected in seed order, so results do not depend on
//! the number of worker threads.

mod checks;
mod gradcheck;
mod report;
mod seeds;
mod stability;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind};
use crate::mdp::{build_chain, build_gridworld, build_theorem3_env, build_zeroing_env, Mdp};
use crate::optim::{argmax_over_hypotheses, one_step_pg, train_pg, train_stochastic_pg, OptimConfig};
use crate::policy::{random_policy_set, zeroing_policy, ExplicitPolicy, Policy, PolicySnapshot, TabularSoftmaxPolicy};

pub use checks::{
    biris_comparison, biris_effect_check, bound_coverage, verify_one_step_pg, verify_overestimation_argmax,
    verify_theorem3, verify_zeroing, CoverageRecord, CoverageReport, KlMode, OneStepReport, Theorem3Report,
    ZeroingReport,
};
pub use gradcheck::{gradient_suite, GradCheckConfig, GradCheckRecord, GradCheckReport};
pub use report::{
    write_bias_csv, write_checks_json, write_summary_csv, BiasRecord, BiasReport, BiasSummary, SampleStats,
    TheoremCheck, Z95, Z99,
};
pub use seeds::{nested_index, substream, Stream};
pub use stability::{stability_probe, StabilityConfig, StabilityReport};

/// Environment name plus builder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvSpec {
    Gridworld {
        n: usize,
        #[serde(default)]
        random_start: bool,
    },
    Chain {
        #[serde(default = "default_chain_states")]
        num_states: usize,
        #[serde(default = "default_chain_slip")]
        slip: f64,
        #[serde(default = "default_chain_horizon")]
        horizon: usize,
    },
    Zeroing {
        num_actions: usize,
    },
    Theorem3 {
        n: u64,
        big_m: f64,
        eps: f64,
    },
}

fn default_chain_states() -> usize {
    3
}

fn default_chain_slip() -> f64 {
    0.2
}

fn default_chain_horizon() -> usize {
    8
}

impl EnvSpec {
    /// The default 3-state chain.
    pub fn chain() -> Self {
        EnvSpec::Chain {
            num_states: default_chain_states(),
            slip: default_chain_slip(),
            horizon: default_chain_horizon(),
        }
    }

    pub fn build(&self) -> Result<Mdp<f64>> {
        match *self {
            EnvSpec::Gridworld { n, random_start } => build_gridworld(n, random_start),
            EnvSpec::Chain { num_states, slip, horizon } => build_chain(num_states, slip, horizon),
            EnvSpec::Zeroing { num_actions } => build_zeroing_env(num_actions),
            EnvSpec::Theorem3 { n, big_m, eps } => Ok(build_theorem3_env(n, big_m, eps)?.0),
        }
    }

    /// Short label used in CSV output, e.g. `5x5`, `5x5-random`, `chain3`.
    pub fn label(&self) -> String {
        match *self {
            EnvSpec::Gridworld { n, random_start: false } => format!("{n}x{n}"),
            EnvSpec::Gridworld { n, random_start: true } => format!("{n}x{n}-random"),
            EnvSpec::Chain { num_states, .. } => format!("chain{num_states}"),
            EnvSpec::Zeroing { num_actions } => format!("zeroing{num_actions}"),
            EnvSpec::Theorem3 { n, .. } => format!("theorem3-n{n}"),
        }
    }
}

/// How the true return of the trained policy is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JTrueMode {
    #[default]
    Exact,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Returns the initial policy without looking at the buffer.
    Identity,
    PgIs,
    PgWis,
    PgIsBiris,
    PgWisBiris,
    /// Single-trajectory stochastic updates.
    StochasticPg,
    OneStepPg,
    /// Best of a fixed random hypothesis set by IS estimate.
    Argmax,
    /// Zeroes every buffer action and renormalizes the behavior policy.
    Zeroing,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::Identity,
        Algorithm::PgIs,
        Algorithm::PgWis,
        Algorithm::PgIsBiris,
        Algorithm::PgWisBiris,
        Algorithm::StochasticPg,
        Algorithm::OneStepPg,
        Algorithm::Argmax,
        Algorithm::Zeroing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Identity => "identity",
            Algorithm::PgIs => "pg_is",
            Algorithm::PgWis => "pg_wis",
            Algorithm::PgIsBiris => "pg_is_biris",
            Algorithm::PgWisBiris => "pg_wis_biris",
            Algorithm::StochasticPg => "stochastic_pg",
            Algorithm::OneStepPg => "one_step_pg",
            Algorithm::Argmax => "argmax",
            Algorithm::Zeroing => "zeroing",
        }
    }

    /// Estimator the algorithm optimizes, used again to report its `J_hat`.
    pub fn estimator(self) -> EstimatorKind {
        match self {
            Algorithm::PgWis | Algorithm::PgWisBiris => EstimatorKind::Wis,
            _ => EstimatorKind::Is,
        }
    }

    /// The optimizer settings this algorithm actually runs with.
    pub fn effective_optim(self, base: &OptimConfig) -> OptimConfig {
        let mut c = base.clone();
        c.objective = self.estimator();
        if matches!(self, Algorithm::PgIs | Algorithm::PgWis) {
            c.biris_alpha = 0.0;
        }
        c
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
            Error::domain("algorithm", format!("unknown algorithm `{s}`; valid names: {}", names.join(", ")))
        })
    }
}

/// One cell of a reuse-bias experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasExperiment {
    pub env: EnvSpec,
    /// Behavior policy; also the optimizers' starting point.
    pub behavior: TabularSoftmaxPolicy<f64>,
    pub algorithm: Algorithm,
    pub optim: OptimConfig,
    /// Size of the random hypothesis set for [`Algorithm::Argmax`].
    pub hypotheses: usize,
    pub buffer_size: usize,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub j_true_mode: JTrueMode,
    /// Fresh rollouts per seed when `j_true_mode` is `Mc`.
    pub mc_rollouts: usize,
}

impl BiasExperiment {
    /// Uniform behavior on `env`, exact `J`, default optimizer settings.
    pub fn new(
        env: EnvSpec,
        algorithm: Algorithm,
        buffer_size: usize,
        n_seeds: usize,
        master_seed: u64,
    ) -> Result<Self> {
        let mdp = env.build()?;
        Ok(Self {
            behavior: TabularSoftmaxPolicy::uniform(mdp.num_states(), mdp.num_actions()),
            env,
            algorithm,
            optim: OptimConfig::default(),
            hypotheses: 8,
            buffer_size,
            n_seeds,
            master_seed,
            j_true_mode: JTrueMode::Exact,
            mc_rollouts: 10_000,
        })
    }
}

/// Precomputed, buffer-independent inputs shared by every seed of an experiment.
pub(crate) struct Prepared {
    pub mdp: Mdp<f64>,
    pub hypotheses: Vec<TabularSoftmaxPolicy<f64>>,
    pub hypothesis_returns: Vec<f64>,
}

impl Prepared {
    pub fn new(exp: &BiasExperiment) -> Result<Self> {
        let mdp = exp.env.build()?;
        if exp.behavior.num_states() != mdp.num_states() || exp.behavior.num_actions() != mdp.num_actions() {
            return Err(Error::ShapeMismatch(format!(
                "behavior policy is {}x{} but {} has {} states and {} actions",
                exp.behavior.num_states(),
                exp.behavior.num_actions(),
                exp.env.label(),
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        if exp.buffer_size == 0 {
            return Err(Error::EmptyBuffer);
        }
        if exp.n_seeds == 0 {
            return Err(Error::domain("n_seeds", "need at least one seed"));
        }
        exp.optim.validate()?;
        let (hypotheses, hypothesis_returns) = if exp.algorithm == Algorithm::Argmax {
            let mut rng = substream(exp.master_seed, Stream::Hypotheses, 0);
            let set = random_policy_set(mdp.num_states(), mdp.num_actions(), exp.hypotheses, &mut rng)?;
            let returns = set.iter().map(|p| mdp.exact_return(p)).collect();
            (set, returns)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self { mdp, hypotheses, hypothesis_returns })
    }
}

/// Output of one algorithm run: the policy and, when it is already known, its exact `J`.
pub(crate) struct AlgorithmOutput {
    pub policy: PolicySnapshot<f64>,
    pub known_return: Option<f64>,
}

pub(crate) fn run_algorithm<R: Rng + ?Sized>(
    exp: &BiasExperiment,
    prep: &Prepared,
    buffer: &ReplayBuffer<f64>,
    rng: &mut R,
) -> Result<AlgorithmOutput> {
    let init = &exp.behavior;
    let optim = exp.algorithm.effective_optim(&exp.optim);
    let policy: PolicySnapshot<f64> = match exp.algorithm {
        Algorithm::Identity => init.clone().into(),
        Algorithm::PgIs | Algorithm::PgWis | Algorithm::PgIsBiris | Algorithm::PgWisBiris => {
            train_pg(buffer, init, &optim)?.0.into()
        }
        Algorithm::StochasticPg => train_stochastic_pg(buffer, init, &optim, rng)?.0.into(),
        Algorithm::OneStepPg => one_step_pg(buffer, init, optim.learning_rate)?.into(),
        Algorithm::Argmax => {
            let i = argmax_over_hypotheses(buffer, &prep.hypotheses)?;
            return Ok(AlgorithmOutput {
                policy: prep.hypotheses[i].clone().into(),
                known_return: Some(prep.hypothesis_returns[i]),
            });
        }
        Algorithm::Zeroing => zeroing_policy(&ExplicitPolicy::from_policy(init), buffer)?.into(),
    };
    Ok(AlgorithmOutput { policy, known_return: None })
}

/// Fresh-rollout estimate of `J` and its standard error.
pub fn mc_return<R: Rng + ?Sized>(
    mdp: &Mdp<f64>,
    policy: &PolicySnapshot<f64>,
    rollouts: usize,
    rng: &mut R,
) -> (f64, f64) {
    let values: Vec<f64> =
        (0..rollouts).map(|_| mdp.sample_trajectory(policy, rng).discounted_return(mdp.gamma())).collect();
    let s = SampleStats::from_values(&values);
    (s.mean, s.std_error)
}

fn run_seed(exp: &BiasExperiment, prep: &Prepared, seed: u64) -> Result<BiasRecord> {
    let mut brng = substream(exp.master_seed, Stream::Buffer, seed);
    let buffer = ReplayBuffer::sample(&prep.mdp, exp.behavior.clone().into(), exp.buffer_size, &mut brng)?;
    let mut arng = substream(exp.master_seed, Stream::Algorithm, seed);
    let out = run_algorithm(exp, prep, &buffer, &mut arng)?;
    let j_hat = estimate(exp.algorithm.estimator(), &buffer, &out.policy)?.value;
    let (j_true, j_true_std_error) = match exp.j_true_mode {
        JTrueMode::Exact => (out.known_return.unwrap_or_else(|| prep.mdp.exact_return(&out.policy)), None),
        JTrueMode::Mc => {
            let mut erng = substream(exp.master_seed, Stream::Evaluation, seed);
            let (j, se) = mc_return(&prep.mdp, &out.policy, exp.mc_rollouts, &mut erng);
            (j, Some(se))
        }
    };
    Ok(BiasRecord { seed, j_true, j_hat, reuse_error: j_hat - j_true, j_true_std_error })
}

/// Reuse error of `exp.algorithm` over `n_seeds` independent buffers: each buffer is both
/// the training data and the evaluation data.
pub fn measure_reuse_bias(exp: &BiasExperiment) -> Result<BiasReport> {
    let prep = Prepared::new(exp)?;
    if exp.j_true_mode == JTrueMode::Mc && exp.mc_rollouts < 2 {
        return Err(Error::domain("mc_rollouts", "need at least 2 rollouts"));
    }
    let records =
        (0..exp.n_seeds as u64).into_par_iter().map(|seed| run_seed(exp, &prep, seed)).collect::<Result<Vec<_>>>()?;
    Ok(BiasReport::new(exp.env.label(), exp.algorithm.name().to_string(), exp.buffer_size, records))
}
