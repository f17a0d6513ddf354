//! Subcommand bodies. Each returns a process exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use advlab_core::oracle::PROBE_CSV_HEADER;
use advlab_core::rng::with_threads;
use advlab_core::trainer::{fmt_sig9, METRICS_HEADER};
use advlab_core::verify::{run_suite, Suite, SuiteOptions};
use advlab_core::{run_experiment, Error, EstimatorKind, FinalEvaluation, IterationMetrics, TrainConfig};

use crate::config::ExperimentConfig;
use crate::{EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY};

pub const SNAPSHOT_FILE: &str = "config.resolved";
pub const SUMMARY_HEADER: &str = "estimator,seed,final_train_reward,final_heldout_reward,final_heldout_pass_at_n,final_kl_ref";

/// Exit code for a core error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::NonFinite(_) | Error::InvalidRatio(_) => EXIT_RUNTIME,
        _ => EXIT_CONFIG,
    }
}

fn fail(err: &Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(err)
}

fn write_file(path: &Path, contents: &str) -> Result<(), i32> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| fail(&Error::io(dir, e)))?;
    }
    fs::write(path, contents).map_err(|e| fail(&Error::io(path, e)))
}

fn validated(cfg: &ExperimentConfig) -> Result<(), i32> {
    cfg.validate().map_err(|e| {
        eprintln!("config error: {e}");
        EXIT_CONFIG
    })
}

fn run_one(cfg: &ExperimentConfig, train: &TrainConfig, out: &Path) -> Result<(Vec<IterationMetrics>, FinalEvaluation), i32> {
    let prompts = cfg.env.build_prompts().map_err(|e| fail(&e))?;
    let policy = cfg.env.build_policy(prompts.len(), train.seed).map_err(|e| fail(&e))?;
    let outcome = run_experiment(train, &prompts, &policy, Some(out)).map_err(|e| fail(&e))?;
    let eval = outcome.evaluate(&prompts, train).map_err(|e| fail(&e))?;
    Ok((outcome.metrics, eval))
}

/// `train`: metrics CSV, final checkpoint and resolved-config snapshot in
/// the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> i32 {
    match train_inner(cfg) {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}

fn train_inner(cfg: &ExperimentConfig) -> Result<(), i32> {
    validated(cfg)?;
    write_file(&cfg.out.join(SNAPSHOT_FILE), &cfg.to_text())?;
    let (metrics, eval) = run_one(cfg, &cfg.train, &cfg.out)?;
    println!(
        "trained {} steps with {} -> {}",
        metrics.len(),
        cfg.train.estimator,
        cfg.out.display()
    );
    println!(
        "final train reward {:.4}, held-out reward {:.4}, held-out pass@{} {:.4}",
        eval.train_reward, eval.heldout_reward, cfg.train.eval_n, eval.heldout_pass_at_n
    );
    Ok(())
}

/// `verify <suite>`: prints a verdict table and writes the probe CSV.
pub fn cmd_verify(cfg: &ExperimentConfig, suite: Suite) -> i32 {
    if let Err(code) = validated(cfg) {
        return code;
    }
    let opts = SuiteOptions {
        trials: cfg.verify.trials,
        seed: cfg.train.seed,
        instances: cfg.verify.instances,
    };
    let reports = match with_threads(cfg.train.threads, || run_suite(suite, &opts)) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let mut csv = String::from(PROBE_CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        println!("{}", r.text_line());
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if let Err(code) = write_file(&cfg.out.join(format!("verify-{}.csv", suite.name())), &csv) {
        return code;
    }
    let passed = reports.iter().filter(|r| r.passed()).count();
    println!("{passed}/{} probes passed", reports.len());
    if passed == reports.len() {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}

fn plot_series(title: &str, points: impl Iterator<Item = (f64, f64)>) -> String {
    let mut out = format!("# {title}\n");
    for (x, y) in points {
        let _ = writeln!(out, "{x} {}", fmt_sig9(y));
    }
    out
}

/// `compare`: one run per (estimator, seed) with everything else fixed.
///
/// Layout under `<out>/compare/`: `<estimator>/<seed>/metrics.csv`,
/// `long.csv`, `summary.csv` and `plots/*.dat` two-column series.
pub fn cmd_compare(cfg: &ExperimentConfig, estimators: &[EstimatorKind], seeds: &[u64]) -> i32 {
    match compare_inner(cfg, estimators, seeds) {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}

fn compare_inner(cfg: &ExperimentConfig, estimators: &[EstimatorKind], seeds: &[u64]) -> Result<(), i32> {
    let mut distinct = estimators.to_vec();
    distinct.dedup();
    if distinct.len() < 2 || seeds.is_empty() {
        eprintln!("config error: compare needs at least two estimators and one seed");
        return Err(EXIT_CONFIG);
    }
    validated(cfg)?;
    let runs: Vec<TrainConfig> = estimators
        .iter()
        .flat_map(|&estimator| {
            seeds.iter().map(move |&seed| TrainConfig {
                estimator,
                seed,
                ..cfg.train.clone()
            })
        })
        .collect();
    for run in &runs {
        run.validate().map_err(|e| {
            eprintln!("config error ({}): {e}", run.estimator);
            EXIT_CONFIG
        })?;
    }
    let root: PathBuf = cfg.out.join("compare");
    write_file(&root.join(SNAPSHOT_FILE), &cfg.to_text())?;

    let mut long = format!("estimator,seed,{METRICS_HEADER}\n");
    let mut summary = format!("{SUMMARY_HEADER}\n");
    println!("{:<14} {:>6} {:>12} {:>14} {:>14}", "estimator", "seed", "train_reward", "heldout_reward", "heldout_pass");
    let mut curves: Vec<(EstimatorKind, u64, Vec<IterationMetrics>)> = Vec::new();
    for run in &runs {
        let key = run.estimator.key();
        let dir = root.join(key).join(run.seed.to_string());
        let (metrics, eval) = run_one(cfg, run, &dir)?;
        for m in &metrics {
            let _ = writeln!(long, "{key},{},{}", run.seed, m.csv_row());
        }
        let final_kl = metrics.last().map_or(f64::NAN, |m| m.kl_ref);
        let _ = writeln!(
            summary,
            "{key},{},{},{},{},{}",
            run.seed,
            fmt_sig9(eval.train_reward),
            fmt_sig9(eval.heldout_reward),
            fmt_sig9(eval.heldout_pass_at_n),
            fmt_sig9(final_kl)
        );
        println!(
            "{:<14} {:>6} {:>12.4} {:>14.4} {:>14.4}",
            key, run.seed, eval.train_reward, eval.heldout_reward, eval.heldout_pass_at_n
        );
        curves.push((run.estimator, run.seed, metrics));
    }
    write_file(&root.join("long.csv"), &long)?;
    write_file(&root.join("summary.csv"), &summary)?;

    let plots = root.join("plots");
    for (est, seed, metrics) in &curves {
        for (name, pick) in [("reward", pick_reward as fn(&IterationMetrics) -> f64), ("kl", pick_kl)] {
            let body = plot_series(
                &format!("step {name} estimator={} seed={seed}", est.key()),
                metrics.iter().map(|m| (m.step as f64, pick(m))),
            );
            write_file(&plots.join(format!("{name}_{}_{seed}.dat", est.key())), &body)?;
        }
    }
    for est in estimators {
        let mine: Vec<&Vec<IterationMetrics>> = curves.iter().filter(|c| c.0 == *est).map(|c| &c.2).collect();
        let steps = mine.iter().map(|m| m.len()).min().unwrap_or(0);
        for (name, pick) in [("reward", pick_reward as fn(&IterationMetrics) -> f64), ("kl", pick_kl)] {
            let body = plot_series(
                &format!("step mean_{name} estimator={} seeds={}", est.key(), seeds.len()),
                (0..steps).map(|s| {
                    let avg = mine.iter().map(|m| pick(&m[s])).sum::<f64>() / mine.len() as f64;
                    (s as f64, avg)
                }),
            );
            write_file(&plots.join(format!("{name}_{}_mean.dat", est.key())), &body)?;
        }
    }
    println!("wrote {}", root.display());
    Ok(())
}

fn pick_reward(m: &IterationMetrics) -> f64 {
    m.reward_mean
}

fn pick_kl(m: &IterationMetrics) -> f64 {
    m.kl_ref
}
