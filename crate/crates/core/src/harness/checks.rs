use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{BiasRecord, BiasReport, SampleStats, TheoremCheck};
use super::seeds::{nested_index, substream, Stream};
use super::{measure_reuse_bias, run_algorithm, Algorithm, BiasExperiment, EnvSpec, Prepared};
use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::estimators::{
    epsilon2_loss, estimate, is_estimate, kl_trajectory_exact, kl_trajectory_mc, reuse_error_bound, BoundInputs,
};
use crate::mdp::{build_theorem3_env, build_zeroing_env, Theorem3Construction, DEFAULT_ENUMERATION_CAP};
use crate::optim::{one_step_pg, OptimConfig};
use crate::policy::{zeroing_policy, ExplicitPolicy, TabularSoftmaxPolicy};
use crate::table::Table;

/// Argmax over `k` fixed random hypotheses; passes iff the 99% lower confidence bound on
/// the mean reuse error is nonnegative.
pub fn verify_overestimation_argmax(
    env: EnvSpec,
    k: usize,
    m: usize,
    n_seeds: usize,
    master_seed: u64,
) -> Result<(TheoremCheck, BiasReport)> {
    if k < 1 {
        return Err(Error::domain("K", "need at least one hypothesis"));
    }
    let mut exp = BiasExperiment::new(env, Algorithm::Argmax, m, n_seeds, master_seed)?;
    exp.hypotheses = k;
    let report = measure_reuse_bias(&exp)?;
    let s = &report.summary.reuse_error;
    let mut check = TheoremCheck::new("thm1");
    check
        .stats("reuse_error", s)
        .stat("relative_reuse_bias", report.summary.relative_reuse_bias)
        .stat("strictly_positive", if s.ci99.0 > 0.0 { 1.0 } else { 0.0 })
        .require("ci99_lo >= 0", s.ci99.0 >= 0.0);
    Ok((check, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepReport {
    pub check: TheoremCheck,
    /// `J_hat(theta') - J(theta')` per buffer.
    pub gap: SampleStats,
    /// `[J_hat(theta') - J(theta')] - [J_hat(theta) - J(theta)]` per buffer. The subtracted
    /// term has mean zero because `theta` does not depend on the buffer, so both statistics
    /// share a mean; this one has far smaller variance.
    pub gap_increment: SampleStats,
}

/// One IS gradient step from the behavior policy on each buffer.
///
/// For `learning_rate > 0` the check passes iff the 99% lower bound on the mean gap
/// (measured through its low-variance increment form) is positive. For
/// `learning_rate = 0` it passes iff the 99% interval of the raw gap covers 0.
pub fn verify_one_step_pg(
    env: EnvSpec,
    learning_rate: f64,
    m: usize,
    n_seeds: usize,
    master_seed: u64,
) -> Result<OneStepReport> {
    if !(learning_rate >= 0.0) {
        return Err(Error::domain("learning_rate", "must be nonnegative"));
    }
    let exp = BiasExperiment::new(env, Algorithm::OneStepPg, m, n_seeds, master_seed)?;
    let prep = Prepared::new(&exp)?;
    let theta = &exp.behavior;
    let j_theta = prep.mdp.exact_return(theta);
    let pairs = (0..n_seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = substream(master_seed, Stream::Buffer, seed);
            let buffer = ReplayBuffer::sample(&prep.mdp, theta.clone().into(), m, &mut rng)?;
            let next = one_step_pg(&buffer, theta, learning_rate)?;
            let gap = is_estimate(&buffer, &next).value - prep.mdp.exact_return(&next);
            let base = is_estimate(&buffer, theta).value - j_theta;
            Ok((gap, gap - base))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let gap = SampleStats::from_values(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let gap_increment = SampleStats::from_values(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let mut check = TheoremCheck::new("thm2");
    check.stat("learning_rate", learning_rate).stats("gap", &gap).stats("gap_increment", &gap_increment);
    if learning_rate > 0.0 {
        check.require("gap_increment.ci99_lo > 0", gap_increment.ci99.0 > 0.0);
    } else {
        check.require("gap ci99 covers 0", gap.covers99(0.0));
    }
    Ok(OneStepReport { check, gap, gap_increment })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    pub check: TheoremCheck,
    pub construction: Theorem3Construction,
    pub j_true: SampleStats,
    pub j_hat: SampleStats,
    /// Buffers where the exact buffer-optimal policy could not be formed (see
    /// [`theorem3_optimal_policy`]).
    pub fallback_buffers: usize,
}

/// Buffer-optimal policy on the Theorem 3 environment, flagged `true` in the fallback case.
///
/// With no rewarded action in the buffer the behavior policy is returned. Otherwise each
/// distinct rewarded buffer action gets mass `1/k` (`k` rewarded occurrences), so the
/// weights over rewarded occurrences sum to one and `J_hat = (M1 + M2) / n`; the remaining
/// `1 - d/k` goes uniformly to rewarded actions absent from the buffer, so `J = 1`.
fn theorem3_optimal_policy(
    c: &Theorem3Construction,
    buffer: &ReplayBuffer<f64>,
) -> Result<(ExplicitPolicy<f64>, bool)> {
    let k_actions = c.num_actions();
    let m1 = c.m1 as usize;
    let mut counts = vec![0usize; k_actions];
    for t in buffer.trajectories() {
        counts[t.steps[0].action] += 1;
    }
    let rewarded: usize = counts[..m1].iter().sum();
    let mut probs = Table::filled(k_actions + 1, k_actions, 1.0 / k_actions as f64);
    if rewarded == 0 {
        return Ok((ExplicitPolicy::new(probs)?, false));
    }
    let distinct: Vec<usize> = (0..m1).filter(|&a| counts[a] > 0).collect();
    let unsampled: Vec<usize> = (0..m1).filter(|&a| counts[a] == 0).collect();
    let row = probs.row_mut(0);
    row.iter_mut().for_each(|p| *p = 0.0);
    let leftover = 1.0 - distinct.len() as f64 / rewarded as f64;
    let fallback = leftover > 0.0 && unsampled.is_empty();
    if fallback {
        for &a in &distinct {
            row[a] = 1.0 / distinct.len() as f64;
        }
    } else {
        for &a in &distinct {
            row[a] = 1.0 / rewarded as f64;
        }
        for &a in &unsampled {
            row[a] = leftover / unsampled.len() as f64;
        }
    }
    Ok((ExplicitPolicy::new(probs)?, fallback))
}

/// Monte Carlo check of the pathological construction against its closed forms.
pub fn verify_theorem3(n: u64, big_m: f64, eps: f64, n_seeds: usize, master_seed: u64) -> Result<Theorem3Report> {
    if n_seeds < 2 {
        return Err(Error::domain("seeds", "need at least 2 seeds"));
    }
    let (mdp, c) = build_theorem3_env::<f64>(n, big_m, eps)?;
    let k_actions = c.num_actions();
    let behavior = ExplicitPolicy::<f64>::uniform(k_actions + 1, k_actions);
    let rows = (0..n_seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = substream(master_seed, Stream::Buffer, seed);
            let buffer = ReplayBuffer::sample(&mdp, behavior.clone().into(), n as usize, &mut rng)?;
            let (policy, fallback) = theorem3_optimal_policy(&c, &buffer)?;
            Ok((mdp.exact_return(&policy), is_estimate(&buffer, &policy).value, fallback))
        })
        .collect::<Result<Vec<(f64, f64, bool)>>>()?;
    let j_true = SampleStats::from_values(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let j_hat = SampleStats::from_values(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let fallback_buffers = rows.iter().filter(|r| r.2).count();

    let mut optimal = Table::filled(k_actions + 1, k_actions, 1.0 / k_actions as f64);
    optimal.row_mut(0).iter_mut().enumerate().for_each(|(a, p)| *p = if a == 0 { 1.0 } else { 0.0 });
    let j_optimal = mdp.exact_return(&ExplicitPolicy::new(optimal)?);

    let (e_j, e_j_hat) = (c.expected_true_return(), c.expected_estimate());
    let mut check = TheoremCheck::new("thm3");
    check
        .stat("a", c.a as f64)
        .stat("b", c.b as f64)
        .stat("x", c.x as f64)
        .stat("M1", c.m1 as f64)
        .stat("M2", c.m2 as f64)
        .stat("p", c.p())
        .stat("closed_form.E_J", e_j)
        .stat("closed_form.E_J_hat", e_j_hat)
        .stat("J_optimal", j_optimal)
        .stat("fallback_buffers", fallback_buffers as f64)
        .stats("J", &j_true)
        .stats("J_hat", &j_hat)
        .require("construction invariants", c.invariants_hold())
        .require("MC E[J] within 4 SE of closed form", j_true.within_se(e_j, 4.0))
        .require("MC E[J_hat] within 4 SE of closed form", j_hat.within_se(e_j_hat, 4.0))
        .require("E[J] <= eps", e_j <= eps && j_true.mean <= eps)
        .require("E[J_hat] >= M", e_j_hat >= big_m && j_hat.mean >= big_m)
        .require("J(optimal) = 1", (j_optimal - 1.0).abs() <= 1e-12)
        .require("no fallback buffers", fallback_buffers == 0);
    Ok(Theorem3Report { check, construction: c, j_true, j_hat, fallback_buffers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroingReport {
    pub check: TheoremCheck,
    pub reports: Vec<BiasReport>,
    /// Buffers redrawn because they covered every action, per buffer size.
    pub resampled: Vec<usize>,
}

const ZEROING_MAX_REDRAWS: usize = 1000;

/// Zeroing policy on the all-rewarding bandit: every seed must give `J_hat = 0`, `J = 1`.
pub fn verify_zeroing(
    m_values: &[usize],
    num_actions: usize,
    n_seeds: usize,
    master_seed: u64,
) -> Result<ZeroingReport> {
    if let Some(&m) = m_values.iter().find(|&&m| m == 0 || m >= num_actions) {
        return Err(Error::domain("m", format!("buffer size {m} must be in 1..{num_actions}")));
    }
    let mdp = build_zeroing_env::<f64>(num_actions)?;
    let behavior = ExplicitPolicy::<f64>::uniform(2, num_actions);
    let env = EnvSpec::Zeroing { num_actions }.label();
    let mut check = TheoremCheck::new("appendix-c");
    let mut reports = Vec::new();
    let mut resampled = Vec::new();
    for (mi, &m) in m_values.iter().enumerate() {
        let rows = (0..n_seeds as u64)
            .into_par_iter()
            .map(|seed| {
                let mut rng = substream(master_seed, Stream::Buffer, nested_index(mi as u64, seed));
                for redraws in 0..ZEROING_MAX_REDRAWS {
                    let buffer = ReplayBuffer::sample(&mdp, behavior.clone().into(), m, &mut rng)?;
                    match zeroing_policy(&behavior, &buffer) {
                        Ok(z) => {
                            let (j_hat, j_true) = (is_estimate(&buffer, &z).value, mdp.exact_return(&z));
                            let record =
                                BiasRecord { seed, j_true, j_hat, reuse_error: j_hat - j_true, j_true_std_error: None };
                            return Ok((record, redraws));
                        }
                        Err(Error::AllActionsSampled { .. }) => continue,
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::domain("m", format!("every draw of {ZEROING_MAX_REDRAWS} buffers covered all actions")))
            })
            .collect::<Result<Vec<(BiasRecord, usize)>>>()?;
        let redraws: usize = rows.iter().map(|r| r.1).sum();
        let report = BiasReport::new(env.clone(), "zeroing".into(), m, rows.into_iter().map(|r| r.0).collect());
        let exact = report.records.iter().all(|r| r.reuse_error == -1.0 && r.j_hat == 0.0 && r.j_true == 1.0);
        check
            .stat(format!("m{m}.mean_reuse_error"), report.summary.reuse_error.mean)
            .stat(format!("m{m}.resampled"), redraws as f64)
            .require(&format!("m{m}: every reuse_error == -1"), exact);
        reports.push(report);
        resampled.push(redraws);
    }
    Ok(ZeroingReport { check, reports, resampled })
}

/// How `eps1` (trajectory KL of the trained policy from the behavior) is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KlMode {
    Exact { cap: usize },
    Mc { samples: usize },
}

impl Default for KlMode {
    fn default() -> Self {
        KlMode::Exact { cap: DEFAULT_ENUMERATION_CAP }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub seed: u64,
    pub reuse_error: f64,
    pub eps1: f64,
    /// Zero for exact `eps1`.
    pub eps1_std_error: f64,
    pub eps2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub check: TheoremCheck,
    pub m: usize,
    pub delta: f64,
    pub records: Vec<CoverageRecord>,
    pub fraction: f64,
}

impl CoverageReport {
    /// Coverage of the same records under another `delta`.
    pub fn fraction_at(&self, delta: f64) -> Result<f64> {
        let mut covered = 0usize;
        for r in &self.records {
            let bound = reuse_error_bound(&BoundInputs { eps1: r.eps1, eps2: r.eps2, m: self.m, delta })?;
            if r.reuse_error.abs() <= bound {
                covered += 1;
            }
        }
        Ok(covered as f64 / self.records.len() as f64)
    }
}

/// Fraction of seeds whose reuse error lies within the high-probability bound evaluated at
/// the trained policy's own `eps1` and `eps2`; passes iff it is at least `1 - delta`.
pub fn bound_coverage(exp: &BiasExperiment, delta: f64, kl: KlMode) -> Result<CoverageReport> {
    let prep = Prepared::new(exp)?;
    let m = exp.buffer_size;
    // Validates m and delta once up front.
    reuse_error_bound(&BoundInputs { eps1: 0.0, eps2: 0.0, m, delta })?;
    let records = (0..exp.n_seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let mut brng = substream(exp.master_seed, Stream::Buffer, seed);
            let buffer = ReplayBuffer::sample(&prep.mdp, exp.behavior.clone().into(), m, &mut brng)?;
            let mut arng = substream(exp.master_seed, Stream::Algorithm, seed);
            let out = run_algorithm(exp, &prep, &buffer, &mut arng)?;
            let j_hat = estimate(exp.algorithm.estimator(), &buffer, &out.policy)?.value;
            let j_true = out.known_return.unwrap_or_else(|| prep.mdp.exact_return(&out.policy));
            let (eps1, eps1_std_error) = match kl {
                KlMode::Exact { cap } => {
                    (kl_trajectory_exact(&prep.mdp, &out.policy, &exp.behavior, prep.mdp.horizon_cap(), cap)?, 0.0)
                }
                KlMode::Mc { samples } => {
                    let mut erng = substream(exp.master_seed, Stream::Evaluation, seed);
                    kl_trajectory_mc(&prep.mdp, &out.policy, &exp.behavior, samples, &mut erng)?
                }
            };
            Ok(CoverageRecord {
                seed,
                reuse_error: j_hat - j_true,
                eps1,
                eps1_std_error,
                eps2: epsilon2_loss(&out.policy, &buffer),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = CoverageReport { check: TheoremCheck::new("thm4-coverage"), m, delta, records, fraction: 0.0 };
    report.fraction = report.fraction_at(delta)?;
    let eps1 = SampleStats::from_values(&report.records.iter().map(|r| r.eps1).collect::<Vec<_>>());
    let eps2 = SampleStats::from_values(&report.records.iter().map(|r| r.eps2).collect::<Vec<_>>());
    let fraction = report.fraction;
    report
        .check
        .stat("m", m as f64)
        .stat("delta", delta)
        .stat("coverage", fraction)
        .stat("eps1.mean", eps1.mean)
        .stat("eps2.mean", eps2.mean)
        .require("coverage >= 1 - delta", fraction >= 1.0 - delta);
    Ok(report)
}

/// Reuse bias of every algorithm at every buffer size on one environment. Reports come
/// out buffer-size major, in the order given.
pub fn biris_comparison(
    env: EnvSpec,
    behavior: Option<TabularSoftmaxPolicy<f64>>,
    m_values: &[usize],
    algorithms: &[Algorithm],
    optim: &OptimConfig,
    n_seeds: usize,
    master_seed: u64,
) -> Result<Vec<BiasReport>> {
    let mut reports = Vec::with_capacity(m_values.len() * algorithms.len());
    for &m in m_values {
        for &alg in algorithms {
            let mut exp = BiasExperiment::new(env.clone(), alg, m, n_seeds, master_seed)?;
            exp.optim = optim.clone();
            if let Some(b) = &behavior {
                exp.behavior = b.clone();
            }
            reports.push(measure_reuse_bias(&exp)?);
        }
    }
    Ok(reports)
}

/// Plain PG objectives against their bias-regularized versions on each report's buffer
/// size. Passes iff every algorithm's mean relative reuse bias is positive and each
/// regularized variant is at most `max_ratio` times its plain counterpart.
pub fn biris_effect_check(reports: &[BiasReport], max_ratio: f64) -> TheoremCheck {
    let mut check = TheoremCheck::new("biris");
    check.stat("max_ratio", max_ratio);
    let mut sizes: Vec<usize> = reports.iter().map(|r| r.buffer_size).collect();
    sizes.dedup();
    for m in sizes {
        let find = |alg: Algorithm| {
            reports
                .iter()
                .find(|r| r.buffer_size == m && r.algorithm == alg.name())
                .map(|r| r.summary.relative_reuse_bias)
        };
        for alg in [Algorithm::PgIs, Algorithm::PgWis, Algorithm::PgIsBiris, Algorithm::PgWisBiris] {
            match find(alg) {
                Some(rel) => {
                    check.stat(format!("m{m}.{alg}.relative_reuse_bias"), rel);
                    check.require(&format!("m{m}.{alg} > 0"), rel > 0.0);
                }
                None => {
                    check.require(&format!("m{m}.{alg} present"), false);
                }
            }
        }
        for (plain, reg) in [(Algorithm::PgIs, Algorithm::PgIsBiris), (Algorithm::PgWis, Algorithm::PgWisBiris)] {
            if let (Some(p), Some(r)) = (find(plain), find(reg)) {
                check.stat(format!("m{m}.{reg}.ratio"), r / p);
                check.require(&format!("m{m}.{reg} <= max_ratio * {plain}"), r <= max_ratio * p);
            }
        }
    }
    check
}
