use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use reuse_bias::estimators::{finite_hypothesis_bound, product_ratio_bound, reuse_error_bound, BoundInputs};
use reuse_bias::harness::{
    biris_effect_check, bound_coverage, gradient_suite, measure_reuse_bias, stability_probe, verify_one_step_pg,
    verify_overestimation_argmax, verify_theorem3, verify_zeroing, write_bias_csv, write_checks_json,
    write_summary_csv, Algorithm, BiasExperiment, BiasReport, CoverageReport, EnvSpec, KlMode, TheoremCheck,
};
use reuse_bias::scalar::format_real;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, ConfigError, ExperimentConfig};
use crate::{BoundsArgs, CheckName, Cli, Command, GradcheckArgs, MeasureArgs, Outcome, VerifyArgs};

pub fn run(cli: &Cli) -> Result<Outcome> {
    let mut overrides = cli.overrides.clone();
    if let Some(dir) = &cli.output_dir {
        overrides.push(format!("output_dir={}", serde_json::to_string(dir)?));
    }
    if let Some(seed) = cli.master_seed {
        overrides.push(format!("master_seed={seed}"));
    }
    let config = config::load(cli.config.as_deref(), &overrides)?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(Outcome::Ok);
    }
    let Some(command) = &cli.command else {
        return Err(ConfigError(vec!["no subcommand given (see --help)".into()]).into());
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(0)).build()?;
    pool.install(|| match command {
        Command::MeasureBias(args) => measure_bias(&config, args),
        Command::Verify(args) => verify(&config, args),
        Command::Bounds(args) => bounds(&config, args),
        Command::Gradcheck(args) => gradcheck(&config, args),
    })
}

fn create_output_dir(config: &ExperimentConfig) -> Result<&Path> {
    let dir = config.output_dir.as_path();
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

fn write_file(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write_file(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

/// Resolved config and command with library versions. The output directory and worker
/// count are left out: neither affects results.
fn write_run_meta(dir: &Path, config: &ExperimentConfig, command: &Command) -> Result<()> {
    let mut cfg = serde_json::to_value(config)?;
    if let Value::Object(map) = &mut cfg {
        map.remove("output_dir");
    }
    let meta = json!({
        "versions": {
            "reuse-bias": reuse_bias::VERSION,
            "reuse-bias-lab": env!("CARGO_PKG_VERSION"),
        },
        "command": command,
        "config": cfg,
    });
    write_json(dir, "run_meta.json", &meta)
}

fn write_checks(dir: &Path, checks: &[TheoremCheck]) -> Result<Outcome> {
    write_file(dir, "theorem_checks.json", |w| {
        write_checks_json(checks, &mut *w)?;
        writeln!(w)?;
        Ok(())
    })?;
    for c in checks {
        eprintln!("{}: {}", c.name, if c.pass { "PASS" } else { "FAIL" });
        for note in &c.notes {
            eprintln!("  {note}");
        }
    }
    Ok(if checks.iter().all(|c| c.pass) { Outcome::Ok } else { Outcome::VerificationFailed })
}

fn write_bias_reports(dir: &Path, reports: &[BiasReport]) -> Result<()> {
    write_file(dir, "bias_report.csv", |w| Ok(write_bias_csv(reports, w)?))?;
    write_file(dir, "summary.csv", |w| Ok(write_summary_csv(reports, w)?))
}

fn experiment(
    config: &ExperimentConfig,
    env: EnvSpec,
    algorithm: Algorithm,
    m: usize,
    n_seeds: usize,
) -> Result<BiasExperiment> {
    let mut exp = BiasExperiment::new(env, algorithm, m, n_seeds, config.master_seed)?;
    if let Some(b) = config.behavior_policy()? {
        exp.behavior = b;
    }
    exp.optim = config.optim.clone();
    exp.hypotheses = config.hypotheses;
    exp.j_true_mode = config.j_true_mode;
    exp.mc_rollouts = config.mc_rollouts;
    Ok(exp)
}

fn parse_algorithms(names: &[String]) -> Result<Vec<Algorithm>> {
    let mut errors = Vec::new();
    let mut algs = Vec::new();
    for name in names {
        match name.parse::<Algorithm>() {
            Ok(a) => algs.push(a),
            Err(e) => errors.push(format!("--algorithms: {e}")),
        }
    }
    if errors.is_empty() {
        Ok(algs)
    } else {
        Err(ConfigError(errors).into())
    }
}

fn measure_bias(config: &ExperimentConfig, args: &MeasureArgs) -> Result<Outcome> {
    let mut args = args.clone();
    if args.algorithms.is_empty() {
        args.algorithms = vec![config.algorithm.clone()];
    }
    let algorithms = parse_algorithms(&args.algorithms)?;
    let mut reports = Vec::new();
    for &m in &config.buffer_sizes {
        for &alg in &algorithms {
            let exp = experiment(config, config.env.clone(), alg, m, config.n_seeds)?;
            reports.push(measure_reuse_bias(&exp)?);
        }
    }
    let dir = create_output_dir(config)?;
    write_bias_reports(dir, &reports)?;
    write_run_meta(dir, config, &Command::MeasureBias(args))?;
    Ok(Outcome::Ok)
}

/// Fill per-check defaults so `run_meta.json` records what actually ran.
fn resolve_verify(config: &ExperimentConfig, args: &VerifyArgs) -> VerifyArgs {
    let mut a = args.clone();
    let (seeds, m) = match a.check {
        CheckName::Thm1 | CheckName::Thm2 => (10_000, vec![10]),
        CheckName::Thm3 => (100_000, vec![]),
        CheckName::Thm4Coverage => (1000, vec![20]),
        CheckName::AppendixC => (100, vec![1, 10, 100]),
        CheckName::Stability => (config.stability.n_bias_seeds, vec![config.stability.buffer_size]),
        CheckName::Biris => (config.n_seeds, config.buffer_sizes.clone()),
    };
    a.seeds.get_or_insert(seeds);
    if a.m.is_empty() {
        a.m = m;
    }
    a
}

fn single_m(args: &VerifyArgs) -> Result<usize> {
    match args.m.as_slice() {
        [m] => Ok(*m),
        _ => Err(ConfigError(vec![format!("--m: {:?} takes exactly one buffer size", args.check)]).into()),
    }
}

fn write_coverage_csv(dir: &Path, report: &CoverageReport) -> Result<()> {
    write_file(dir, "coverage.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["seed", "reuse_error", "eps1", "eps1_std_error", "eps2", "bound"])?;
        for r in &report.records {
            let bound =
                reuse_error_bound(&BoundInputs { eps1: r.eps1, eps2: r.eps2, m: report.m, delta: report.delta })?;
            csv.write_record([
                r.seed.to_string(),
                format_real(r.reuse_error),
                format_real(r.eps1),
                format_real(r.eps1_std_error),
                format_real(r.eps2),
                format_real(bound),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })
}

fn verify(config: &ExperimentConfig, args: &VerifyArgs) -> Result<Outcome> {
    let args = resolve_verify(config, args);
    let seeds = args.seeds.expect("resolved");
    let master = config.master_seed;
    let dir = create_output_dir(config)?;
    let checks = match args.check {
        CheckName::Thm1 => {
            let (check, report) =
                verify_overestimation_argmax(EnvSpec::chain(), args.k, single_m(&args)?, seeds, master)?;
            write_bias_reports(dir, &[report])?;
            vec![check]
        }
        CheckName::Thm2 => {
            let grid = EnvSpec::Gridworld { n: 3, random_start: false };
            let m = single_m(&args)?;
            let mut checks = vec![verify_one_step_pg(grid.clone(), args.lr, m, seeds, master)?.check];
            if args.lr > 0.0 {
                let mut control = verify_one_step_pg(grid, 0.0, m, seeds, master)?.check;
                control.name = "thm2-control".into();
                checks.push(control);
            }
            checks
        }
        CheckName::Thm3 => {
            let report = verify_theorem3(args.n, args.big_m, args.eps, seeds, master)?;
            write_json(dir, "theorem3.json", &report)?;
            vec![report.check]
        }
        CheckName::Thm4Coverage => {
            let exp = experiment(config, EnvSpec::chain(), Algorithm::PgIs, single_m(&args)?, seeds)?;
            let report = bound_coverage(&exp, config.delta, KlMode::default())?;
            write_coverage_csv(dir, &report)?;
            vec![report.check]
        }
        CheckName::AppendixC => {
            let report = verify_zeroing(&args.m, args.actions, seeds, master)?;
            write_bias_reports(dir, &report.reports)?;
            vec![report.check]
        }
        CheckName::Stability => {
            let mut sc = config.stability.clone();
            sc.buffer_size = single_m(&args)?;
            sc.n_bias_seeds = seeds;
            let report = stability_probe(EnvSpec::chain(), None, &sc, master)?;
            write_json(dir, "stability.json", &report)?;
            vec![report.check]
        }
        CheckName::Biris => {
            let algs = [Algorithm::PgIs, Algorithm::PgWis, Algorithm::PgIsBiris, Algorithm::PgWisBiris];
            let mut reports = Vec::new();
            for &m in &args.m {
                for alg in algs {
                    reports.push(measure_reuse_bias(&experiment(config, config.env.clone(), alg, m, seeds)?)?);
                }
            }
            write_bias_reports(dir, &reports)?;
            vec![biris_effect_check(&reports, args.max_ratio)]
        }
    };
    write_run_meta(dir, config, &Command::Verify(args))?;
    write_checks(dir, &checks)
}

fn bounds(config: &ExperimentConfig, args: &BoundsArgs) -> Result<Outcome> {
    let mut args = args.clone();
    let delta = *args.delta.get_or_insert(config.delta);
    let mut out = serde_json::Map::new();
    let mut errors = Vec::new();
    // A group is requested once any of its own flags is given; `--m` is shared.
    let mut group = |name: &str, own: &[(&str, bool)], shared: &[(&str, bool)]| -> bool {
        if !own.iter().any(|(_, p)| *p) {
            return false;
        }
        let missing: Vec<&str> = own.iter().chain(shared).filter(|(_, p)| !p).map(|(n, _)| *n).collect();
        if !missing.is_empty() {
            errors.push(format!("{name}: missing --{}", missing.join(", --")));
        }
        missing.is_empty()
    };
    let m = [("m", args.m.is_some())];
    let want_reuse = group("reuse_error_bound", &[("eps1", args.eps1.is_some()), ("eps2", args.eps2.is_some())], &m);
    let want_finite =
        group("finite_hypothesis_bound", &[("h-size", args.h_size.is_some()), ("rho-max", args.rho_max.is_some())], &m);
    let want_product =
        group("product_ratio_bound", &[("eps", args.eps.is_some()), ("horizon", args.horizon.is_some())], &[]);
    if !errors.is_empty() {
        return Err(ConfigError(errors).into());
    }
    if !(want_reuse || want_finite || want_product) {
        return Err(ConfigError(vec![
            "bounds: give --eps1 --eps2 --m, or --m --h-size --rho-max, or --eps --horizon".into()
        ])
        .into());
    }
    let domain = |r: reuse_bias::Result<f64>| r.map_err(|e| anyhow::Error::new(ConfigError(vec![e.to_string()])));
    if want_reuse {
        let (eps1, eps2, m) = (args.eps1.unwrap(), args.eps2.unwrap(), args.m.unwrap());
        let value = domain(reuse_error_bound(&BoundInputs { eps1, eps2, m, delta }))?;
        out.insert(
            "reuse_error_bound".into(),
            json!({"eps1": eps1, "eps2": eps2, "m": m, "delta": delta, "value": value}),
        );
    }
    if want_finite {
        let (m, h, rho) = (args.m.unwrap(), args.h_size.unwrap(), args.rho_max.unwrap());
        let value = domain(finite_hypothesis_bound(m, h, delta, rho))?;
        out.insert(
            "finite_hypothesis_bound".into(),
            json!({"m": m, "h_size": h, "rho_max": rho, "delta": delta, "value": value}),
        );
    }
    if want_product {
        let (eps, horizon) = (args.eps.unwrap(), args.horizon.unwrap());
        let value = domain(product_ratio_bound(eps, horizon))?;
        out.insert("product_ratio_bound".into(), json!({"eps": eps, "horizon": horizon, "value": value}));
    }
    let out = Value::Object(out);
    println!("{}", serde_json::to_string_pretty(&out)?);
    let dir = create_output_dir(config)?;
    write_json(dir, "bounds.json", &out)?;
    write_run_meta(dir, config, &Command::Bounds(args))?;
    Ok(Outcome::Ok)
}

fn gradcheck(config: &ExperimentConfig, args: &GradcheckArgs) -> Result<Outcome> {
    let mut args = args.clone();
    let mut gc = config.gradcheck.clone();
    gc.n_configs = *args.configs.get_or_insert(gc.n_configs);
    let report = gradient_suite(&gc, config.master_seed)?;
    let dir = create_output_dir(config)?;
    write_json(dir, "gradcheck.json", &report)?;
    write_run_meta(dir, config, &Command::Gradcheck(args))?;
    write_checks(dir, &[report.check])
}
