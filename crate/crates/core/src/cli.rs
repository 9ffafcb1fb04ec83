//! Command-line front door. One subcommand per pipeline stage; every run
//! writes a `resolved-config.toml` snapshot into its output directory, so an
//! output tree is self-describing and reproducible from the artifacts alone.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adapt::{train_transform_net, transform_and_classify, AdaptConfig};
use crate::baselines::{finetune, train_oracle, FinetuneScheme, LabelBudget};
use crate::config::{load_experiment_config, write_snapshot};
use crate::datasets::{default_data_root, load_dataset, DatasetId, Split};
use crate::error::{Error, Result};
use crate::experiments::{
    self, load_environment, read_records_csv, run_finetune_comparison, run_multiaxis_sweep,
    run_range_sweep, run_severity_sweep, write_records_csv, SweepKind,
};
use crate::image::ImageTensor;
use crate::models::{
    build_source_classifier, build_transform_net, load_classifier, load_transform_net,
    save_classifier, save_transform_net, train_source_classifier, Classifier, ClassifierMeta,
    TnetMeta, EVAL_BATCH,
};
use crate::plots::emit_plots;
use crate::seeds;
use crate::shiftgen::{
    apply_shift, read_shift_manifest, read_shifted_dataset, write_shifted_dataset, Axis,
    ShiftSpec, ShiftStage,
};
use crate::transforms::ParamSpace;

/// Parses `argv` and runs the selected subcommand. Returns the process exit
/// code: 0 on success, 2 for usage errors (clap prints the usage text), 1 for
/// runtime failures (one diagnostic line on stderr).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "unshift",
    version,
    about = "Adapt a frozen classifier to parametric image shifts without source data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the source classifier on a clean training split
    TrainSource(TrainSourceArgs),
    /// Sample a shifted copy of a dataset split and write it to disk
    MakeShift(MakeShiftArgs),
    /// Fit a transformation net to unlabeled target images against a frozen model
    Adapt(AdaptArgs),
    /// Train a supervised baseline: oracle, ft-last or ft-full
    Baseline(BaselineArgs),
    /// Measure accuracy of a model, optionally through a transformation net
    Eval(EvalArgs),
    /// Run a sweep from a config file and write the results CSV
    Sweep(SweepArgs),
    /// Render figures from a results CSV
    Plot(PlotArgs),
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::TrainSource(a) => cmd_train_source(a),
        Command::MakeShift(a) => cmd_make_shift(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn resolve_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(default_data_root)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::InvalidParameter(format!(
            "unknown split {other:?}, expected train or test"
        ))),
    }
}

fn snapshot<T: Serialize>(out: &Path, resolved: &T) -> Result<()> {
    write_snapshot(out, resolved).map(|_| ())
}

fn predict_all(model: &mut Classifier, images: &[ImageTensor]) -> Vec<usize> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        out.extend(model.predict(&refs));
    }
    out
}

fn describe_stages(stages: &[ShiftStage]) -> String {
    stages
        .iter()
        .map(|s| format!("{} mu={} sigma={}", s.axis.name(), s.mu, s.sigma))
        .collect::<Vec<_>>()
        .join(" + ")
}

// -- train-source ------------------------------------------------------------------

#[derive(Debug, Args)]
struct TrainSourceArgs {
    /// Dataset to train on (mnist | cifar10)
    #[arg(long)]
    dataset: String,
    /// Output directory for the checkpoint
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset cache root; defaults to $UNSHIFT_DATA_DIR or ~/.cache/unshift
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Cap on training images via a seeded subsample, for desk-scale runs
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Serialize)]
struct TrainSourceSnapshot<'a> {
    command: &'a str,
    dataset: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_limit: Option<usize>,
    data_root: &'a Path,
}

fn cmd_train_source(a: &TrainSourceArgs) -> Result<()> {
    let id = DatasetId::parse(&a.dataset)?;
    let root = resolve_root(&a.data_root);
    snapshot(
        &a.out,
        &TrainSourceSnapshot {
            command: "train-source",
            dataset: id.name(),
            seed: a.seed,
            train_limit: a.train_limit,
            data_root: &root,
        },
    )?;
    let mut train = load_dataset(id, Split::Train, &root)?;
    if let Some(n) = a.train_limit {
        train = experiments::desk_subset(train, n, a.seed, "limit-train")?;
    }
    let mut model = build_source_classifier(id, a.seed);
    let report = train_source_classifier(&mut model, &train, a.seed)?;
    let meta = ClassifierMeta {
        arch: model.arch.name().into(),
        dataset: id.name().into(),
        classes: train.num_classes(),
        mean: model.norm.mean.clone(),
        std: model.norm.std.clone(),
        seed: a.seed,
        val_accuracy: Some(report.best_val_accuracy),
        scheme: None,
        n_labels: None,
    };
    save_classifier(&a.out, &mut model, &meta)?;
    println!(
        "trained {} on {} images, val accuracy {:.4}, saved to {}",
        model.arch.name(),
        train.len(),
        report.best_val_accuracy,
        a.out.display()
    );
    Ok(())
}

// -- make-shift --------------------------------------------------------------------

#[derive(Debug, Args)]
struct MakeShiftArgs {
    /// Dataset to shift (mnist | cifar10)
    #[arg(long)]
    dataset: String,
    /// Shift axis; repeat --axis/--mu/--sigma in order for composed stages
    #[arg(long, required = true)]
    axis: Vec<String>,
    /// Gaussian mean for the matching --axis
    #[arg(long, required = true)]
    mu: Vec<f64>,
    /// Gaussian standard deviation for the matching --axis
    #[arg(long, required = true)]
    sigma: Vec<f64>,
    /// Split to shift (train | test)
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Cap on images via a seeded subsample before shifting
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Serialize)]
struct MakeShiftSnapshot<'a> {
    command: &'a str,
    dataset: &'a str,
    split: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    limit: Option<usize>,
    data_root: &'a Path,
    stages: &'a [ShiftStage],
}

fn cmd_make_shift(a: &MakeShiftArgs) -> Result<()> {
    if a.axis.len() != a.mu.len() || a.axis.len() != a.sigma.len() {
        return Err(Error::Config(format!(
            "got {} --axis, {} --mu and {} --sigma values; counts must match",
            a.axis.len(),
            a.mu.len(),
            a.sigma.len()
        )));
    }
    let id = DatasetId::parse(&a.dataset)?;
    let split = parse_split(&a.split)?;
    let stages = a
        .axis
        .iter()
        .zip(&a.mu)
        .zip(&a.sigma)
        .map(|((axis, &mu), &sigma)| Ok(ShiftStage::new(Axis::parse(axis)?, mu, sigma)))
        .collect::<Result<Vec<_>>>()?;
    let spec = ShiftSpec {
        stages,
        seed: a.seed,
    };
    for w in spec.validate()? {
        eprintln!("warning: {w}");
    }
    let root = resolve_root(&a.data_root);
    snapshot(
        &a.out,
        &MakeShiftSnapshot {
            command: "make-shift",
            dataset: id.name(),
            split: split.name(),
            seed: a.seed,
            limit: a.limit,
            data_root: &root,
            stages: &spec.stages,
        },
    )?;
    let mut base = load_dataset(id, split, &root)?;
    if let Some(n) = a.limit {
        base = experiments::desk_subset(base, n, a.seed, "limit-target")?;
    }
    let shifted = apply_shift(&base, &spec)?;
    let manifest = write_shifted_dataset(&shifted, &spec, &a.out)?;
    println!(
        "wrote {} shifted images ({}) to {}",
        manifest.count,
        describe_stages(&spec.stages),
        a.out.display()
    );
    Ok(())
}

// -- adapt -------------------------------------------------------------------------

#[derive(Debug, Args)]
struct AdaptArgs {
    /// Frozen source classifier checkpoint directory
    #[arg(long)]
    source_model: PathBuf,
    /// Shifted dataset directory (from make-shift); labels are ignored
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f32,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Softmax temperature in the adaptation objective
    #[arg(long, default_value_t = 10.0)]
    temperature: f32,
}

#[derive(Serialize)]
struct AdaptSnapshot<'a> {
    command: &'a str,
    dataset: &'a str,
    seed: u64,
    temperature: f32,
    lr: f32,
    epochs: usize,
    batch_size: usize,
    source_model: &'a Path,
    target: &'a Path,
    shift: &'a [ShiftStage],
}

fn cmd_adapt(a: &AdaptArgs) -> Result<()> {
    let (mut phi, meta) = load_classifier(&a.source_model)?;
    let id = DatasetId::parse(&meta.dataset)?;
    let (target, manifest) = read_shifted_dataset(&a.target)?;
    let acfg = AdaptConfig {
        temperature: a.temperature,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: seeds::derive(a.seed, "adapt-train", &[]),
    };
    acfg.validate()?;
    snapshot(
        &a.out,
        &AdaptSnapshot {
            command: "adapt",
            dataset: id.name(),
            seed: a.seed,
            temperature: a.temperature,
            lr: a.lr,
            epochs: a.epochs,
            batch_size: a.batch_size,
            source_model: &a.source_model,
            target: &a.target,
            shift: &manifest.stages,
        },
    )?;
    let init_seed = seeds::derive(a.seed, "tnet-init", &[]);
    let mut net = build_transform_net(id, ParamSpace::default(), init_seed);
    let history = train_transform_net(&mut net, target.images(), &mut phi, &acfg)?;
    let tmeta = TnetMeta {
        arch: net.arch.name().into(),
        dataset: id.name().into(),
        seed: init_seed,
        space: net.space,
        loss_history: history.clone(),
    };
    save_transform_net(&a.out, &mut net, &tmeta)?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (i, loss) in history.iter().enumerate() {
        csv.push_str(&format!("{},{loss}\n", i + 1));
    }
    let hpath = a.out.join("loss-history.csv");
    fs::write(&hpath, csv).map_err(|e| Error::io(&hpath, e))?;
    println!(
        "adapted on {} images over {} epochs, mean loss {:.6} -> {:.6}, saved to {}",
        target.len(),
        history.len(),
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

// -- baseline ----------------------------------------------------------------------

#[derive(Debug, Args)]
struct BaselineArgs {
    /// Baseline kind: oracle | ft-last | ft-full
    kind: String,
    /// Source checkpoint to fine-tune (ft-last / ft-full only)
    #[arg(long)]
    source_model: Option<PathBuf>,
    /// Labeled shifted dataset directory (from make-shift)
    #[arg(long)]
    target: PathBuf,
    /// Dataset whose clean training split the oracle retrains on
    #[arg(long)]
    dataset: Option<String>,
    /// Label budget drawn from the target pool (ft-last / ft-full only)
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Cap on oracle training images via a seeded subsample
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Serialize)]
struct BaselineSnapshot<'a> {
    command: &'a str,
    kind: &'a str,
    dataset: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_labels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_model: Option<&'a Path>,
    target: &'a Path,
    shift: &'a [ShiftStage],
}

fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    if a.kind == "oracle" {
        return cmd_baseline_oracle(a);
    }
    let scheme = FinetuneScheme::parse(&a.kind)?;
    let src_dir = a.source_model.as_deref().ok_or_else(|| {
        Error::Config(format!("baseline {} requires --source-model", a.kind))
    })?;
    let n = a.n_labels.ok_or_else(|| {
        Error::Config(format!("baseline {} requires --n-labels", a.kind))
    })?;
    let (mut source, smeta) = load_classifier(src_dir)?;
    let (target, manifest) = read_shifted_dataset(&a.target)?;
    snapshot(
        &a.out,
        &BaselineSnapshot {
            command: "baseline",
            kind: scheme.name(),
            dataset: &smeta.dataset,
            seed: a.seed,
            n_labels: Some(n),
            train_limit: None,
            source_model: Some(src_dir),
            target: &a.target,
            shift: &manifest.stages,
        },
    )?;
    let budget = LabelBudget::new(n)?;
    let ft_seed = seeds::derive(a.seed, "finetune", &[n as u64]);
    let (mut model, report) = finetune(&mut source, &target, budget, scheme, ft_seed)?;
    let meta = ClassifierMeta {
        arch: model.arch.name().into(),
        dataset: smeta.dataset.clone(),
        classes: smeta.classes,
        mean: model.norm.mean.clone(),
        std: model.norm.std.clone(),
        seed: a.seed,
        val_accuracy: Some(report.best_val_accuracy),
        scheme: Some(scheme.name().into()),
        n_labels: Some(n),
    };
    save_classifier(&a.out, &mut model, &meta)?;
    println!(
        "{} with {} labels, held-out accuracy {:.4}, saved to {}",
        scheme.name(),
        n,
        report.best_val_accuracy,
        a.out.display()
    );
    Ok(())
}

fn cmd_baseline_oracle(a: &BaselineArgs) -> Result<()> {
    let dataset = a
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("baseline oracle requires --dataset".into()))?;
    let id = DatasetId::parse(dataset)?;
    let manifest = read_shift_manifest(&a.target)?;
    let spec = ShiftSpec {
        stages: manifest.stages.clone(),
        seed: manifest.seed,
    };
    let root = resolve_root(&a.data_root);
    snapshot(
        &a.out,
        &BaselineSnapshot {
            command: "baseline",
            kind: "oracle",
            dataset: id.name(),
            seed: a.seed,
            n_labels: None,
            train_limit: a.train_limit,
            source_model: None,
            target: &a.target,
            shift: &spec.stages,
        },
    )?;
    let mut train = load_dataset(id, Split::Train, &root)?;
    if let Some(n) = a.train_limit {
        train = experiments::desk_subset(train, n, a.seed, "limit-train")?;
    }
    let oracle_seed = seeds::derive(a.seed, "oracle-train", &[]);
    let (mut model, report) = train_oracle(id, &train, &spec, oracle_seed)?;
    let meta = ClassifierMeta {
        arch: model.arch.name().into(),
        dataset: id.name().into(),
        classes: train.num_classes(),
        mean: model.norm.mean.clone(),
        std: model.norm.std.clone(),
        seed: a.seed,
        val_accuracy: Some(report.best_val_accuracy),
        scheme: Some("oracle".into()),
        n_labels: None,
    };
    save_classifier(&a.out, &mut model, &meta)?;
    println!(
        "oracle retrained on the shifted source domain, val accuracy {:.4}, saved to {}",
        report.best_val_accuracy,
        a.out.display()
    );
    Ok(())
}

// -- eval --------------------------------------------------------------------------

#[derive(Debug, Args)]
struct EvalArgs {
    /// Classifier checkpoint directory
    #[arg(long)]
    model: PathBuf,
    /// Transformation net checkpoint; when set, images pass through the
    /// learned backward transform before classification
    #[arg(long)]
    tnet: Option<PathBuf>,
    /// Shifted dataset directory to evaluate on
    #[arg(long)]
    target: Option<PathBuf>,
    /// Clean dataset to evaluate on instead of --target (mnist | cifar10)
    #[arg(long)]
    dataset: Option<String>,
    /// Split when evaluating a clean dataset (train | test)
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on images via a seeded subsample
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    command: &'a str,
    data: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    limit: Option<usize>,
    model: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    tnet: Option<&'a Path>,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    data: &'a str,
    count: usize,
    correct: usize,
    accuracy: f64,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (mut model, _) = load_classifier(&a.model)?;
    let root = resolve_root(&a.data_root);
    let mut ds = match (&a.target, &a.dataset) {
        (Some(dir), None) => read_shifted_dataset(dir)?.0,
        (None, Some(name)) => {
            load_dataset(DatasetId::parse(name)?, parse_split(&a.split)?, &root)?
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --target or --dataset".into(),
            ))
        }
    };
    if let Some(n) = a.limit {
        ds = experiments::desk_subset(ds, n, a.seed, "limit-target")?;
    }
    let data_name = ds.name().to_string();
    snapshot(
        &a.out,
        &EvalSnapshot {
            command: "eval",
            data: &data_name,
            seed: a.seed,
            limit: a.limit,
            model: &a.model,
            tnet: a.tnet.as_deref(),
        },
    )?;
    let predictions = match &a.tnet {
        Some(dir) => {
            let (mut net, _) = load_transform_net(dir)?;
            transform_and_classify(&mut net, ds.images(), &mut model)?.0
        }
        None => predict_all(&mut model, ds.images()),
    };
    let correct = predictions
        .iter()
        .zip(ds.labels())
        .filter(|(p, l)| p == l)
        .count();
    let accuracy = correct as f64 / ds.len() as f64;
    let report = EvalReport {
        data: &data_name,
        count: ds.len(),
        correct,
        accuracy,
    };
    let rpath = a.out.join("eval.toml");
    let text = toml::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("serializing eval report: {e}")))?;
    fs::write(&rpath, text).map_err(|e| Error::io(&rpath, e))?;
    println!(
        "accuracy {:.4} ({}/{}) on {}",
        accuracy,
        correct,
        ds.len(),
        data_name
    );
    Ok(())
}

// -- sweep -------------------------------------------------------------------------

#[derive(Debug, Args)]
struct SweepArgs {
    /// Sweep kind: severity | range | finetune | multiaxis
    kind: String,
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Trained source classifier checkpoint directory
    #[arg(long)]
    source_model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads over grid points (1 = run sequentially)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Replace the config's seed list with this single seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let kind = SweepKind::parse(&a.kind)?;
    let mut cfg = load_experiment_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    let root = resolve_root(&a.data_root);
    let mut env = load_environment(&cfg, &a.source_model, &root)?;
    let resolved = cfg.resolve(env.target_base.len())?;
    write_snapshot(&a.out, &resolved)?;
    let records = match kind {
        SweepKind::Severity => run_severity_sweep(&cfg, &mut env, a.jobs)?,
        SweepKind::Range => run_range_sweep(&cfg, &mut env, a.jobs)?,
        SweepKind::Finetune => run_finetune_comparison(&cfg, &mut env, a.jobs)?,
        SweepKind::Multiaxis => run_multiaxis_sweep(&cfg, &mut env, a.jobs)?,
    };
    let csv = a.out.join("results.csv");
    write_records_csv(&csv, &records)?;
    println!("wrote {} records to {}", records.len(), csv.display());
    Ok(())
}

// -- plot --------------------------------------------------------------------------

#[derive(Debug, Args)]
struct PlotArgs {
    /// Results CSV produced by sweep
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct PlotSnapshot<'a> {
    command: &'a str,
    results: &'a Path,
    records: usize,
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let records = read_records_csv(&a.results)?;
    snapshot(
        &a.out,
        &PlotSnapshot {
            command: "plot",
            results: &a.results,
            records: records.len(),
        },
    )?;
    let figures = emit_plots(&records, &a.out)?;
    println!("rendered {} figure(s) to {}", figures.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(args)
    }

    #[test]
    fn flag_passthrough_builds_the_expected_stages() {
        let cli = parse(&[
            "unshift", "make-shift", "--dataset", "mnist", "--axis", "rotation", "--mu", "30",
            "--sigma", "2", "--seed", "7", "--out", "d",
        ])
        .unwrap();
        match cli.command {
            Command::MakeShift(a) => {
                assert_eq!(a.axis, vec!["rotation"]);
                assert_eq!(a.mu, vec![30.0]);
                assert_eq!(a.sigma, vec![2.0]);
                assert_eq!(a.seed, 7);
                assert_eq!(a.split, "test");
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn adapt_without_source_model_names_the_flag() {
        let err = parse(&["unshift", "adapt", "--target", "t", "--out", "o"]).unwrap_err();
        assert!(err.to_string().contains("--source-model"), "{err}");
        assert!(err.use_stderr());
    }

    #[test]
    fn unknown_subcommands_and_flags_are_usage_errors() {
        let err = parse(&["unshift", "frobnicate"]).unwrap_err();
        assert!(err.use_stderr());
        let err = parse(&["unshift", "plot", "--results", "r", "--out", "o", "--nope"])
            .unwrap_err();
        assert!(err.use_stderr());
        assert_eq!(run(["unshift", "frobnicate"]), 2);
        assert_eq!(run(["unshift", "--help"]), 0);
    }

    #[test]
    fn mismatched_stage_flags_are_rejected() {
        let a = MakeShiftArgs {
            dataset: "mnist".into(),
            axis: vec!["rotation".into(), "brightness".into()],
            mu: vec![30.0],
            sigma: vec![2.0],
            split: "test".into(),
            seed: 0,
            out: PathBuf::from("nowhere"),
            data_root: None,
            limit: None,
        };
        let err = cmd_make_shift(&a).unwrap_err();
        assert!(err.to_string().contains("counts must match"), "{err}");
    }

    #[test]
    fn runtime_failures_exit_nonzero() {
        assert_eq!(
            run([
                "unshift",
                "plot",
                "--results",
                "/nonexistent/results.csv",
                "--out",
                "/tmp/unshift-cli-test-plot",
            ]),
            1
        );
    }
}
