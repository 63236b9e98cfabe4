use std::path::{Path, PathBuf};

use anyhow::Context;
use reuse_bias::harness::{Algorithm, EnvSpec, GradCheckConfig, JTrueMode, StabilityConfig};
use reuse_bias::optim::OptimConfig;
use reuse_bias::policy::{Policy, TabularSoftmaxPolicy};
use reuse_bias::table::Table;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// `"uniform"` or `{"logits_file": "path"}` holding a JSON array of per-state logit rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorSpec {
    #[default]
    Uniform,
    LogitsFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub behavior: BehaviorSpec,
    pub algorithm: String,
    pub optim: OptimConfig,
    pub hypotheses: usize,
    pub buffer_sizes: Vec<usize>,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub delta: f64,
    pub output_dir: PathBuf,
    pub j_true_mode: JTrueMode,
    pub mc_rollouts: usize,
    pub stability: StabilityConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::Gridworld { n: 5, random_start: false },
            behavior: BehaviorSpec::Uniform,
            algorithm: Algorithm::PgIs.name().to_string(),
            optim: OptimConfig::default(),
            hypotheses: 8,
            buffer_sizes: vec![30],
            n_seeds: 50,
            master_seed: 0,
            delta: 0.05,
            output_dir: PathBuf::from("out"),
            j_true_mode: JTrueMode::Exact,
            mc_rollouts: 10_000,
            stability: StabilityConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Invalid configuration; every violation found is listed.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn single(msg: impl Into<String>) -> ConfigError {
    ConfigError(vec![msg.into()])
}

/// Set `a.b.c` in a JSON object, creating intermediate objects. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| format!("override `{assignment}` is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key `{key}` has an empty component"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| format!("override `{key}`: `{part}` is not inside an object"))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| format!("override `{key}`: parent is not an object"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Read the config file (if any), apply overrides, fill defaults and validate.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut root = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| single(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| single(format!("config {} is not JSON: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(single("config must be a JSON object"));
    }
    let errors: Vec<String> = overrides.iter().filter_map(|o| apply_override(&mut root, o).err()).collect();
    if !errors.is_empty() {
        return Err(ConfigError(errors));
    }
    let errors = field_errors(&root);
    if !errors.is_empty() {
        return Err(ConfigError(errors));
    }
    let config: ExperimentConfig = serde_json::from_value(root).map_err(|e| single(e.to_string()))?;
    let errors = validate(&config);
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError(errors))
    }
}

/// Deserialize each top-level field on its own against the defaults, so that every
/// malformed or unknown field is reported rather than only the first.
fn field_errors(root: &Value) -> Vec<String> {
    let defaults = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    let (Value::Object(given), Value::Object(known)) = (root, &defaults) else {
        return Vec::new();
    };
    let mut errors = Vec::new();
    for (key, value) in given {
        if !known.contains_key(key) {
            let names: Vec<&str> = known.keys().map(String::as_str).collect();
            errors.push(format!("unknown field `{key}`; expected one of {}", names.join(", ")));
            continue;
        }
        let mut probe = known.clone();
        probe.insert(key.clone(), value.clone());
        if let Err(e) = serde_json::from_value::<ExperimentConfig>(Value::Object(probe)) {
            errors.push(format!("{key}: {e}"));
        }
    }
    errors
}

fn validate(c: &ExperimentConfig) -> Vec<String> {
    let mut errors = Vec::new();
    let mdp = match c.env.build() {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(format!("env: {e}"));
            None
        }
    };
    if let Err(e) = c.algorithm.parse::<Algorithm>() {
        errors.push(format!("algorithm: {e}"));
    }
    if let Err(e) = c.optim.validate() {
        errors.push(format!("optim: {e}"));
    }
    if c.n_seeds == 0 {
        errors.push("n_seeds: must be at least 1".into());
    }
    if c.buffer_sizes.is_empty() {
        errors.push("buffer_sizes: must list at least one size".into());
    }
    if c.buffer_sizes.contains(&0) {
        errors.push("buffer_sizes: sizes must be at least 1".into());
    }
    if c.hypotheses == 0 {
        errors.push("hypotheses: must be at least 1".into());
    }
    if !(c.delta > 0.0 && c.delta < 1.0) {
        errors.push(format!("delta: {} is not in (0, 1)", c.delta));
    }
    if c.j_true_mode == JTrueMode::Mc && c.mc_rollouts < 2 {
        errors.push("mc_rollouts: need at least 2 rollouts in mc mode".into());
    }
    if let Err(e) = c.stability.optim.validate() {
        errors.push(format!("stability.optim: {e}"));
    }
    if c.stability.n_algo_seeds == 0 || c.stability.n_buffer_pairs == 0 || c.stability.buffer_size == 0 {
        errors.push("stability: buffer_size, n_algo_seeds and n_buffer_pairs must be at least 1".into());
    }
    if c.gradcheck.n_configs == 0 {
        errors.push("gradcheck.n_configs: must be at least 1".into());
    }
    if let BehaviorSpec::LogitsFile(path) = &c.behavior {
        match read_logits(path) {
            Err(e) => errors.push(format!("behavior: {e:#}")),
            Ok(p) => {
                if let Some(mdp) = &mdp {
                    if p.num_states() != mdp.num_states() || p.num_actions() != mdp.num_actions() {
                        errors.push(format!(
                            "behavior: logits are {}x{} but the env has {} states and {} actions",
                            p.num_states(),
                            p.num_actions(),
                            mdp.num_states(),
                            mdp.num_actions()
                        ));
                    }
                }
            }
        }
    }
    errors
}

fn read_logits(path: &Path) -> anyhow::Result<TabularSoftmaxPolicy<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read logits file {}", path.display()))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
        .with_context(|| format!("logits file {} is not a JSON array of rows", path.display()))?;
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        anyhow::bail!("logits file {} has non-finite entries", path.display());
    }
    Ok(TabularSoftmaxPolicy::from_logits(Table::from_rows(&rows)?))
}

impl ExperimentConfig {
    /// `None` means uniform over the env's actions.
    pub fn behavior_policy(&self) -> anyhow::Result<Option<TabularSoftmaxPolicy<f64>>> {
        match &self.behavior {
            BehaviorSpec::Uniform => Ok(None),
            BehaviorSpec::LogitsFile(p) => read_logits(p).map(Some),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_or_strings() {
        let mut v = serde_json::json!({});
        apply_override(&mut v, "optim.learning_rate=0.5").unwrap();
        apply_override(&mut v, "algorithm=pg_wis").unwrap();
        apply_override(&mut v, "buffer_sizes=[1,2]").unwrap();
        assert_eq!(
            v,
            serde_json::json!({"optim": {"learning_rate": 0.5}, "algorithm": "pg_wis", "buffer_sizes": [1, 2]})
        );
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "algorithm.x=1").is_err());
    }

    #[test]
    fn defaults_validate() {
        let c = load(None, &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn errors_are_aggregated() {
        let err = load(None, &["n_seeds=0".into(), "algorithm=nope".into(), "delta=2".into()]).unwrap_err();
        assert_eq!(err.0.len(), 3, "{err}");
        let err = load(None, &["optim.bogus=1".into(), "n_seeds=-1".into(), "extra=1".into()]).unwrap_err();
        assert_eq!(err.0.len(), 3, "{err}");
    }
}
