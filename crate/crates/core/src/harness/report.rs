use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::format_real;

/// Two-sided normal quantiles.
pub const Z95: f64 = 1.959_963_984_540_054;
pub const Z99: f64 = 2.575_829_303_548_900_4;

/// Mean, spread and normal-approximation intervals of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    pub ci99: (f64, f64),
}

impl SampleStats {
    /// Sequential summation keeps the result a pure function of the input order.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        let std_error = if n == 0 { f64::NAN } else { std / (n as f64).sqrt() };
        Self {
            n,
            mean,
            std,
            std_error,
            ci95: (mean - Z95 * std_error, mean + Z95 * std_error),
            ci99: (mean - Z99 * std_error, mean + Z99 * std_error),
        }
    }

    /// Whether `value` lies in the 99% interval.
    pub fn covers99(&self, value: f64) -> bool {
        self.ci99.0 <= value && value <= self.ci99.1
    }

    /// `|mean - value| <= k` standard errors.
    pub fn within_se(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub seed: u64,
    pub j_true: f64,
    pub j_hat: f64,
    pub reuse_error: f64,
    /// Standard error of `j_true` when it comes from fresh rollouts.
    pub j_true_std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub reuse_error: SampleStats,
    pub mean_j_true: f64,
    pub mean_j_hat: f64,
    /// `mean(reuse_error) / mean(j_true)`.
    pub relative_reuse_bias: f64,
    /// Standard error of `mean_j_true` contributed by rollout noise; `None` for exact J.
    pub mean_j_true_mc_std_error: Option<f64>,
}

/// Per-seed records of one (env, algorithm, buffer size) cell plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub env: String,
    pub algorithm: String,
    pub buffer_size: usize,
    pub records: Vec<BiasRecord>,
    pub summary: BiasSummary,
}

impl BiasReport {
    pub fn new(env: String, algorithm: String, buffer_size: usize, mut records: Vec<BiasRecord>) -> Self {
        records.sort_by_key(|r| r.seed);
        let errors: Vec<f64> = records.iter().map(|r| r.reuse_error).collect();
        let n = records.len() as f64;
        let mean_j_true = records.iter().map(|r| r.j_true).sum::<f64>() / n;
        let mean_j_hat = records.iter().map(|r| r.j_hat).sum::<f64>() / n;
        let reuse_error = SampleStats::from_values(&errors);
        let mc =
            records.iter().map(|r| r.j_true_std_error.map(|se| se * se)).sum::<Option<f64>>().map(|v| v.sqrt() / n);
        Self {
            env,
            algorithm,
            buffer_size,
            records,
            summary: BiasSummary {
                relative_reuse_bias: reuse_error.mean / mean_j_true,
                reuse_error,
                mean_j_true,
                mean_j_hat,
                mean_j_true_mc_std_error: mc,
            },
        }
    }
}

fn has_mc(reports: &[BiasReport]) -> bool {
    reports.iter().flat_map(|r| &r.records).any(|r| r.j_true_std_error.is_some())
}

/// `seed, env, algorithm, buffer_size, j_true, j_hat, reuse_error`, plus
/// `j_true_std_error` when any record carries one.
pub fn write_bias_csv<W: Write>(reports: &[BiasReport], writer: W) -> Result<()> {
    let mc = has_mc(reports);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["seed", "env", "algorithm", "buffer_size", "j_true", "j_hat", "reuse_error"];
    if mc {
        header.push("j_true_std_error");
    }
    w.write_record(&header)?;
    for rep in reports {
        for r in &rep.records {
            let mut row = vec![
                r.seed.to_string(),
                rep.env.clone(),
                rep.algorithm.clone(),
                rep.buffer_size.to_string(),
                format_real(r.j_true),
                format_real(r.j_hat),
                format_real(r.reuse_error),
            ];
            if mc {
                row.push(r.j_true_std_error.map(format_real).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `env, algorithm, buffer_size, mean_reuse_error, std_error, relative_reuse_bias,
/// ci95_lo, ci95_hi`.
pub fn write_summary_csv<W: Write>(reports: &[BiasReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "env",
        "algorithm",
        "buffer_size",
        "mean_reuse_error",
        "std_error",
        "relative_reuse_bias",
        "ci95_lo",
        "ci95_hi",
    ])?;
    for rep in reports {
        let s = &rep.summary;
        w.write_record([
            rep.env.clone(),
            rep.algorithm.clone(),
            rep.buffer_size.to_string(),
            format_real(s.reuse_error.mean),
            format_real(s.reuse_error.std_error),
            format_real(s.relative_reuse_bias),
            format_real(s.reuse_error.ci95.0),
            format_real(s.reuse_error.ci95.1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of one named verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub name: String,
    pub pass: bool,
    pub statistics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl TheoremCheck {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), pass: true, statistics: BTreeMap::new(), notes: Vec::new() }
    }

    pub fn stat(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.statistics.insert(key.into(), value);
        self
    }

    /// Record a named condition; the check passes only if every condition holds.
    pub fn require(&mut self, condition: &str, holds: bool) -> &mut Self {
        self.stat(format!("{condition}.holds"), if holds { 1.0 } else { 0.0 });
        if !holds {
            self.pass = false;
            self.notes.push(format!("failed: {condition}"));
        }
        self
    }

    pub fn stats(&mut self, prefix: &str, s: &SampleStats) -> &mut Self {
        self.stat(format!("{prefix}.mean"), s.mean)
            .stat(format!("{prefix}.std_error"), s.std_error)
            .stat(format!("{prefix}.ci99_lo"), s.ci99.0)
            .stat(format!("{prefix}.ci99_hi"), s.ci99.1)
            .stat(format!("{prefix}.n"), s.n as f64)
    }
}

/// `theorem_checks.json`: check name to outcome.
pub fn write_checks_json<W: Write>(checks: &[TheoremCheck], writer: W) -> Result<()> {
    let map: BTreeMap<&str, &TheoremCheck> = checks.iter().map(|c| (c.name.as_str(), c)).collect();
    serde_json::to_writer_pretty(writer, &map)?;
    Ok(())
}
