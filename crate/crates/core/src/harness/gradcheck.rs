use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::TheoremCheck;
use super::seeds::{substream, Stream};
use super::EnvSpec;
use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::optim::{finite_diff_check, GradObjective};
use crate::policy::TabularSoftmaxPolicy;
use crate::table::Table;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub n_configs: usize,
    /// Central-difference step.
    pub h: f64,
    /// Tolerance for the IS and WIS objectives.
    pub smooth_tol: f64,
    pub penalty_tol: f64,
    /// The penalty is only checked when every `|w - 1|` exceeds this.
    pub kink_margin: f64,
    /// Logits are drawn uniformly from `[-logit_scale, logit_scale]`.
    pub logit_scale: f64,
    pub max_buffer_size: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n_configs: 100,
            h: 1e-5,
            smooth_tol: 1e-5,
            penalty_tol: 1e-4,
            kink_margin: 0.1,
            logit_scale: 0.5,
            max_buffer_size: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRecord {
    pub index: usize,
    pub env: String,
    pub buffer_size: usize,
    pub is_rel_err: f64,
    /// `None` when every buffer return is equal, which makes the WIS objective constant.
    pub wis_rel_err: Option<f64>,
    /// `None` when some weight lies within the kink margin of 1.
    pub penalty_rel_err: Option<f64>,
    pub min_kink_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub check: TheoremCheck,
    pub records: Vec<GradCheckRecord>,
}

fn random_policy<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> TabularSoftmaxPolicy<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
    TabularSoftmaxPolicy::from_logits(Table::from_vec(rows, cols, data).expect("shape matches"))
}

/// Analytic gradients of the IS and WIS objectives and of the bias penalty against central
/// differences over every logit coordinate, on randomized environments, behavior and
/// target policies and buffers.
pub fn gradient_suite(config: &GradCheckConfig, master_seed: u64) -> Result<GradCheckReport> {
    if config.n_configs == 0 || config.max_buffer_size < 2 {
        return Err(Error::domain("gradcheck", "need at least one configuration and buffers of size 2"));
    }
    if !(config.logit_scale > 0.0) {
        return Err(Error::domain("logit_scale", "must be positive"));
    }
    let envs = [
        EnvSpec::chain(),
        EnvSpec::Gridworld { n: 3, random_start: true },
        EnvSpec::Chain { num_states: 4, slip: 0.1, horizon: 6 },
    ];
    let mdps = envs.iter().map(EnvSpec::build).collect::<Result<Vec<_>>>()?;
    let records = (0..config.n_configs)
        .into_par_iter()
        .map(|index| {
            let mut rng = substream(master_seed, Stream::GradCheck, index as u64);
            let k = rng.random_range(0..envs.len());
            let mdp = &mdps[k];
            let (s, a) = (mdp.num_states(), mdp.num_actions());
            let behavior = random_policy(s, a, config.logit_scale, &mut rng);
            let m = rng.random_range(2..=config.max_buffer_size);
            let buffer = ReplayBuffer::sample(mdp, behavior.into(), m, &mut rng)?;
            let target = random_policy(s, a, config.logit_scale, &mut rng);
            let min_kink_distance =
                buffer.weights(&target).iter().map(|w| (w - 1.0).abs()).fold(f64::INFINITY, f64::min);
            let is_rel_err = finite_diff_check(&buffer, &target, GradObjective::Is, config.h, None, &mut rng)?;
            let returns = buffer.returns();
            let wis_rel_err = if returns.iter().all(|&r| r == returns[0]) {
                None
            } else {
                Some(finite_diff_check(&buffer, &target, GradObjective::Wis, config.h, None, &mut rng)?)
            };
            let penalty_rel_err = if min_kink_distance > config.kink_margin {
                Some(finite_diff_check(&buffer, &target, GradObjective::BirisPenalty, config.h, None, &mut rng)?)
            } else {
                None
            };
            Ok(GradCheckRecord {
                index,
                env: envs[k].label(),
                buffer_size: m,
                is_rel_err,
                wis_rel_err,
                penalty_rel_err,
                min_kink_distance,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let max = |f: &dyn Fn(&GradCheckRecord) -> Option<f64>| records.iter().filter_map(f).fold(0.0, f64::max);
    let is_max = max(&|r| Some(r.is_rel_err));
    let wis_max = max(&|r| r.wis_rel_err);
    let wis_checked = records.iter().filter(|r| r.wis_rel_err.is_some()).count();
    let penalty_max = max(&|r| r.penalty_rel_err);
    let penalty_checked = records.iter().filter(|r| r.penalty_rel_err.is_some()).count();
    let mut check = TheoremCheck::new("gradcheck");
    check
        .stat("n_configs", records.len() as f64)
        .stat("is.max_rel_err", is_max)
        .stat("wis.max_rel_err", wis_max)
        .stat("wis.n_checked", wis_checked as f64)
        .stat("penalty.max_rel_err", penalty_max)
        .stat("penalty.n_checked", penalty_checked as f64)
        .require("is max_rel_err < smooth_tol", is_max < config.smooth_tol)
        .require("wis max_rel_err < smooth_tol", wis_max < config.smooth_tol)
        .require("penalty max_rel_err < penalty_tol", penalty_max < config.penalty_tol)
        .require("wis checked on some configuration", wis_checked > 0)
        .require("penalty checked on some configuration", penalty_checked > 0);
    Ok(GradCheckReport { check, records })
}
