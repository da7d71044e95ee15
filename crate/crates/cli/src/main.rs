//! `amtfnet`: generate data, train, evaluate, gradient-check and ablate.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input or config,
//! 3 numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amtfnet::data::{load_csv, stratified_split, write_csv, NormStats, WindowedDataset};
use amtfnet::diagnostics::gradient_suite;
use amtfnet::model::{count_parameters, Amtfnet, Checkpoint, Variant};
use amtfnet::train::{evaluate, export_features, threads_from_env, train, TrainReport};
use amtfnet::Error;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{prepare, ClassEntry, Manifest, ManifestFile, RunConfig};

#[derive(Parser)]
#[command(name = "amtfnet", version, about = "Multimode fault diagnosis with a temporal-fusion network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured plant and write one CSV per (mode, condition).
    Generate(RunArgs),
    /// Normalize, window, split and train; writes a checkpoint and reports.
    Train(RunArgs),
    /// Score a checkpoint on a config's test split or on CSV files.
    Eval(EvalArgs),
    /// Finite-difference check of every layer and the end-to-end loss.
    Gradcheck(GradcheckArgs),
    /// Train every ablation variant on the same data and seed.
    Ablate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate the test split this config produces.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    config: Option<PathBuf>,
    /// Evaluate every window of these CSV files.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write classifier-input features as CSV.
    #[arg(long)]
    export_features: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the results as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add a check with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Ablate(a) => ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// Config with CLI overrides applied, and the created output directory.
fn resolve(args: &RunArgs) -> Result<(RunConfig, PathBuf), Error> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = config.out_dir(args.out.as_deref())?;
    create_dir(&out)?;
    config.out = Some(absolute(&out)?);
    if let Some(d) = &mut config.data {
        if let Some(m) = &mut d.manifest {
            *m = absolute(m)?;
        }
        for f in &mut d.files {
            *f = absolute(f)?;
        }
    }
    write_json(&out.join("resolved_config.json"), &config)?;
    Ok((config, out))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn absolute(p: &Path) -> Result<PathBuf, Error> {
    std::path::absolute(p).map_err(|e| Error::Io { path: p.into(), source: e })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn generate(args: &RunArgs) -> Outcome {
    let (config, out) = resolve(args)?;
    let gen = config
        .generator
        .as_ref()
        .ok_or_else(|| Error::Config("generate needs a \"generator\" section".into()))?;
    let seed = config.generator_seed();
    let runs = amtfnet::data::synth_generate(gen, seed)?;
    let mut files = Vec::with_capacity(runs.len());
    for run in &runs {
        let name = format!("run_m{}_c{}.csv", run.mode, run.condition);
        write_csv(&out.join(&name), &run.series)?;
        files.push(ManifestFile {
            file: name,
            mode: run.mode,
            condition: run.condition,
            rows: run.series.rows(),
        });
    }
    let mut classes = vec![ClassEntry { label: 0, name: "normal".into() }];
    for (i, f) in gen.faults.iter().enumerate() {
        let kind = serde_json::to_value(f.kind).map_err(Error::from)?;
        let kind = kind.as_str().unwrap_or("fault");
        classes.push(ClassEntry { label: i + 1, name: format!("{kind}_loop{}", f.group) });
    }
    let manifest = Manifest {
        seed: config.seed,
        generator_seed: seed,
        num_classes: gen.num_classes(),
        vars: gen.vars(),
        columns: runs[0].series.columns.clone(),
        classes,
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    eprintln!("wrote {} runs to {}", runs.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    model: &'a amtfnet::model::ModelConfig,
    train: &'a TrainReport,
    test: &'a amtfnet::metrics::EvalReport,
}

fn train_cmd(args: &RunArgs) -> Outcome {
    let (config, out) = resolve(args)?;
    let data = prepare(&config)?;
    let threads = threads_from_env()?;
    let mut model = Amtfnet::new(data.model.clone(), config.seed)?;
    eprintln!(
        "training {} ({} parameters) on {} windows, validating on {}",
        data.model.variant,
        model.parameter_count(),
        data.train.len(),
        data.val.len()
    );
    let report = train(&mut model, &data.train, &data.val, &config.train, config.seed, threads, log_epoch)?;
    let test = evaluate(&model, &data.test, threads)?;
    eprintln!("best epoch {}, test micro-F1 {:.4}", report.best_epoch, test.micro_f1);
    Checkpoint { model, norm: Some(data.stats) }.save(&out.join("checkpoint.bin"))?;
    write_json(
        &out.join("train_report.json"),
        &TrainOutput { model: &data.model, train: &report, test: &test },
    )?;
    Ok(())
}

fn log_epoch(r: &amtfnet::train::EpochRecord) {
    eprintln!("epoch {:>3}  lr {:.3e}  loss {:.5}  val micro-F1 {:.4}", r.epoch, r.lr, r.loss, r.val_micro_f1);
}

fn eval_cmd(args: &EvalArgs) -> Outcome {
    let Checkpoint { model, norm } = Checkpoint::load(&args.checkpoint)?;
    let mc = model.config().clone();
    let ds = match &args.config {
        Some(path) => {
            let mut config = RunConfig::load(path)?;
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            let source = config.load_series()?;
            check_dims(&mc, source.vars(), source.num_classes)?;
            let stats = norm.unwrap_or_else(|| NormStats::identity(mc.v));
            // the split depends only on window labels and modes, so the
            // checkpoint's statistics reproduce the training-time test split
            let ds = WindowedDataset::slide(source.series, mc.w, Some(stats))?;
            stratified_split(&ds, &config.split, mc.num_classes, config.seed)?.2
        }
        None => {
            let series = args
                .data
                .iter()
                .map(|f| load_csv(f, Some(mc.num_classes)))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(s) = series.iter().find(|s| s.vars() != mc.v) {
                return Err(Error::Data(format!(
                    "data has {} variables ({:?}) but the checkpoint expects v = {}",
                    s.vars(),
                    s.columns,
                    mc.v
                ))
                .into());
            }
            let stats = norm.unwrap_or_else(|| NormStats::identity(mc.v));
            WindowedDataset::slide(series, mc.w, Some(stats))?
        }
    };
    let threads = threads_from_env()?;
    let report = evaluate(&model, &ds, threads)?;
    create_dir(&args.out)?;
    report.write_json(&args.out.join("eval_report.json"))?;
    report.write_class_csv(&args.out.join("eval_classes.csv"))?;
    if let Some(path) = &args.export_features {
        export_features(&model, &ds, path, threads)?;
    }
    println!(
        "samples {}  micro-F1 {:.4}  macro-F1 {:.4}  avg FDR {:.4}  avg FPR {:.4}",
        report.samples, report.micro_f1, report.macro_f1, report.avg_fdr, report.avg_fpr
    );
    Ok(())
}

fn check_dims(mc: &amtfnet::model::ModelConfig, v: usize, classes: usize) -> Result<(), Error> {
    if mc.v != v || mc.num_classes != classes {
        return Err(Error::Data(format!(
            "data has v = {v}, {classes} classes; the checkpoint expects v = {}, {} classes",
            mc.v, mc.num_classes
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow<'a> {
    name: &'a str,
    max_error: f64,
    tol: f64,
    passed: bool,
}

fn gradcheck(args: &GradcheckArgs) -> Outcome {
    let results = gradient_suite(args.seed, args.inject_fault)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:>12.3e}  (tol {:.0e})  {status}", r.name, r.max_error, r.tol);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let rows: Vec<_> = results
            .iter()
            .map(|r| GradcheckRow { name: &r.name, max_error: r.max_error, tol: r.tol, passed: r.passed() })
            .collect();
        write_json(&dir.join("gradcheck.json"), &rows)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn ablate(args: &RunArgs) -> Outcome {
    let (config, out) = resolve(args)?;
    let data = prepare(&config)?;
    let threads = threads_from_env()?;
    let mut table = String::from("variant,micro_f1,macro_f1,parameters\n");
    for variant in Variant::ALL {
        let mc = data.model.clone().with_variant(variant);
        let mut model = Amtfnet::new(mc.clone(), config.seed)?;
        eprintln!("training {variant}");
        train(&mut model, &data.train, &data.val, &config.train, config.seed, threads, log_epoch)?;
        let test = evaluate(&model, &data.test, threads)?;
        let parameters = count_parameters(&mc);
        table.push_str(&format!("{variant},{},{},{parameters}\n", test.micro_f1, test.macro_f1));
        eprintln!("{variant}: micro-F1 {:.4}", test.micro_f1);
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, &table).map_err(|e| Error::Io { path, source: e })?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn inject_fault_is_hidden() {
        let help = Cli::command().find_subcommand_mut("gradcheck").unwrap().render_long_help().to_string();
        assert!(!help.contains("inject-fault"));
        assert!(help.contains("--seed"));
    }
}
