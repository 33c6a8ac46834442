//! `gradmerge`: merge checkpoints, compute importance, run diagnostics and
//! toy experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use gradmerge::checkpoint::{validate_compatibility, write_checkpoint, WriteOptions};
use gradmerge::experiment::{additive_on, build_world, comparison_on, ToyExperimentConfig};
use gradmerge::importance::{load_importance, save_importance, toy_importance, CalibrationSet, ImportanceMap, DEFAULT_SAMPLE_CAP};
use gradmerge::merge::{additive_inject_scaled, run_recipe, Direction, Recipe};
use gradmerge::spectral::{layerwise_spectral_report, LayerPattern, SampleMode, SpectralOptions, DEFAULT_LAYER_PATTERN};
use gradmerge::task_vector::compute_task_vector;
use gradmerge::{NameFilter, TaskVector, ToyModel, WeightMap};

#[derive(Parser, Debug)]
#[command(name = "gradmerge", version, about = "Importance-guided model merging toolkit")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "GRADMERGE_THREADS", default_value_t = 0, display_order = 100)]
    threads: usize,

    /// Log level for progress output on stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", display_order = 101)]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a merge recipe; writes the merged checkpoint and a JSON report.
    Merge(MergeArgs),
    /// Compute a toy model's importance on a calibration set.
    Importance(ImportanceArgs),
    /// Per-layer nuclear norms and MAD of a gradient-matrix dump.
    Spectral(SpectralArgs),
    /// Add a fine-tuned model's highest- or lowest-importance deltas to a base.
    Inject(InjectArgs),
    /// List a checkpoint's tensors and metadata.
    Inspect(InspectArgs),
    /// Run the toy additive-injection and merge-comparison experiments.
    Experiment(ExperimentArgs),
}

#[derive(clap::Args, Debug)]
struct MergeArgs {
    /// Recipe JSON file.
    recipe: PathBuf,
    /// Fraction of parameters kept from the task importance.
    #[arg(long)]
    p_t: Option<f64>,
    /// Fraction of parameters kept from the reasoning importance.
    #[arg(long)]
    p_r: Option<f64>,
    /// Scale on the task-model delta.
    #[arg(long)]
    lambda_t: Option<f64>,
    /// Scale on the reasoning-model delta.
    #[arg(long)]
    lambda_r: Option<f64>,
    /// global or per_tensor.
    #[arg(long)]
    scope: Option<String>,
    /// include or exclude_zero.
    #[arg(long)]
    zero_policy: Option<String>,
    /// keep or f32.
    #[arg(long)]
    dtype_policy: Option<String>,
    /// DARE drop seed.
    #[arg(long)]
    seed: Option<u64>,
    /// TIES trim density.
    #[arg(long)]
    density: Option<f64>,
    /// DARE drop rate.
    #[arg(long)]
    drop_rate: Option<f64>,
    /// Merged checkpoint path.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    report_output: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct ImportanceArgs {
    /// Toy model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Calibration set JSON.
    #[arg(long)]
    calib: PathBuf,
    /// Use at most this many calibration samples.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
    samples: usize,
    /// Importance file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    PerSample,
    Mean,
}

#[derive(clap::Args, Debug)]
struct SpectralArgs {
    /// Gradient dump checkpoint.
    dump: PathBuf,
    /// Tensor-name template with {layer}, {kind} and optional {sample}.
    #[arg(long, default_value = DEFAULT_LAYER_PATTERN)]
    pattern: String,
    /// Average per-sample matrices first, or score each sample.
    #[arg(long, value_enum, default_value = "mean")]
    mode: ModeArg,
    /// Include singular values in the JSON report.
    #[arg(long)]
    singular_values: bool,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Optional flat CSV (kind, layer, nuclear, frobenius, rank).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    Highest,
    Lowest,
}

#[derive(clap::Args, Debug)]
struct InjectArgs {
    /// Base checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Fine-tuned checkpoint.
    #[arg(long)]
    fine: PathBuf,
    /// Importance file for the fine-tuned model.
    #[arg(long, conflicts_with = "calib", required_unless_present = "calib")]
    importance: Option<PathBuf>,
    /// Calibration JSON; importance is computed with the toy oracle.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Use at most this many calibration samples.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
    samples: usize,
    /// Selection ratio.
    #[arg(long)]
    p: f64,
    /// Which end of the importance ranking to inject.
    #[arg(long, value_enum)]
    direction: DirectionArg,
    /// Scale on the injected delta.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct InspectArgs {
    /// Checkpoint to list.
    checkpoint: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args, Debug)]
struct ExperimentArgs {
    /// Config JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for additive.{csv,json}, comparison.{csv,json} and config.json.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(1);
    }
    log::info!("threads: {}", rayon::current_num_threads());
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 is clap's usage error; module errors get one code per category.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<gradmerge::Error>().map(|e| e.category()) {
        Some("format") => 3,
        Some("lookup") => 4,
        Some("consistency") => 5,
        Some("validation") => 6,
        Some("io") => 7,
        Some("precondition") => 8,
        _ => 1,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Merge(a) => cmd_merge(a),
        Command::Importance(a) => cmd_importance(a),
        Command::Spectral(a) => cmd_spectral(a),
        Command::Inject(a) => cmd_inject(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// Relative paths given on the command line are relative to the working
/// directory, not to the recipe.
fn abs(p: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn cmd_merge(a: MergeArgs) -> anyhow::Result<()> {
    let mut overrides = Map::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            log::info!("override {k} = {v}");
            overrides.insert(k.to_string(), v);
        }
    };
    put("p_t", a.p_t.map(|v| json!(v)));
    put("p_r", a.p_r.map(|v| json!(v)));
    put("lambda_t", a.lambda_t.map(|v| json!(v)));
    put("lambda_r", a.lambda_r.map(|v| json!(v)));
    put("scope", a.scope.map(|v| json!(v)));
    put("zero_policy", a.zero_policy.map(|v| json!(v)));
    put("dtype_policy", a.dtype_policy.map(|v| json!(v)));
    put("seed", a.seed.map(|v| json!(v)));
    put("density", a.density.map(|v| json!(v)));
    put("drop_rate", a.drop_rate.map(|v| json!(v)));
    put("output", a.output.as_deref().map(abs).transpose()?.map(|v| json!(v)));
    put("report_output", a.report_output.as_deref().map(abs).transpose()?.map(|v| json!(v)));

    let recipe = Recipe::from_file_with(&a.recipe, overrides)?;
    log::info!("resolved recipe: {}", recipe.to_value());
    let report = run_recipe(&recipe)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if let Some(m) = &report.masks {
        log::info!(
            "|N_t|={} |N_r|={} overlap={} |T'_t|={} |T'_r|={}",
            m.n_t, m.n_r, m.overlap, m.t_t, m.t_r
        );
    }
    log::info!("wrote {}", recipe.output.display());
    Ok(())
}

fn toy_source(model: &WeightMap, calib: &Path, samples: usize) -> anyhow::Result<ImportanceMap> {
    let toy = ToyModel::<f64>::from_weight_map(model, None)?;
    let calib = CalibrationSet::<f64>::from_json_file(calib, samples)?;
    log::info!("calibration {:?}: {} samples", calib.id, calib.len());
    Ok(toy_importance(&toy, &calib)?)
}

fn cmd_importance(a: ImportanceArgs) -> anyhow::Result<()> {
    log::info!(
        "importance: model={} calib={} samples={} out={}",
        a.model.display(),
        a.calib.display(),
        a.samples,
        a.out.display()
    );
    let model = WeightMap::open(&a.model)?;
    let mut imp = toy_source(&model, &a.calib, a.samples)?;
    imp.provenance.model_id = model
        .metadata()
        .get("model_id")
        .cloned()
        .unwrap_or_else(|| a.model.display().to_string());
    save_importance(&a.out, &imp)?;
    // Revalidate what was written.
    load_importance(&a.out, &model, None)?;
    Ok(())
}

/// Write several files, removing all of them if any write fails.
fn write_all(files: &[(&Path, String)]) -> anyhow::Result<()> {
    for (i, (path, text)) in files.iter().enumerate() {
        if let Err(e) = fs::write(path, text) {
            for (p, _) in &files[..=i] {
                let _ = fs::remove_file(p);
            }
            return Err(gradmerge::Error::Io {
                context: path.display().to_string(),
                source: e,
            }
            .into());
        }
    }
    Ok(())
}

fn cmd_spectral(a: SpectralArgs) -> anyhow::Result<()> {
    let options = SpectralOptions {
        mode: match a.mode {
            ModeArg::PerSample => SampleMode::PerSample,
            ModeArg::Mean => SampleMode::Mean,
        },
        keep_singular_values: a.singular_values,
    };
    log::info!(
        "spectral: dump={} pattern={:?} mode={:?} out={} csv={:?}",
        a.dump.display(),
        a.pattern,
        options.mode,
        a.out.display(),
        a.csv
    );
    let dump = WeightMap::open(&a.dump)?;
    let report = layerwise_spectral_report(&dump, &LayerPattern::new(&a.pattern)?, &options)?;
    for note in &report.notes {
        log::info!("{note}");
    }
    let mut files = vec![(a.out.as_path(), serde_json::to_string_pretty(&report)?)];
    if let Some(csv) = &a.csv {
        files.push((csv.as_path(), report.to_csv()?));
    }
    write_all(&files)
}

fn cmd_inject(a: InjectArgs) -> anyhow::Result<()> {
    let direction = match a.direction {
        DirectionArg::Highest => Direction::Highest,
        DirectionArg::Lowest => Direction::Lowest,
    };
    log::info!(
        "inject: base={} fine={} importance={:?} calib={:?} samples={} p={} direction={direction:?} scale={} out={}",
        a.base.display(),
        a.fine.display(),
        a.importance,
        a.calib,
        a.samples,
        a.p,
        a.scale,
        a.out.display()
    );
    let base = WeightMap::open(&a.base)?;
    let fine = WeightMap::open(&a.fine)?;
    let compat = validate_compatibility(&[&fine, &base], &NameFilter::default())?;
    let imp = match (&a.importance, &a.calib) {
        (Some(path), _) => load_importance(path, &fine, None)?,
        (None, Some(calib)) => toy_source(&fine, calib, a.samples)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let merged = if base.names().any(|n| base.dtype(n).map(|d| d == gradmerge::Dtype::F64).unwrap_or(false)) {
        let tv: TaskVector<f64> = compute_task_vector(&fine, &base, &compat)?;
        additive_inject_scaled(&base, &tv, &imp, a.p, direction, a.scale)?
    } else {
        let tv: TaskVector<f32> = compute_task_vector(&fine, &base, &compat)?;
        additive_inject_scaled(&base, &tv, &imp, a.p, direction, a.scale as f32)?
    };
    write_checkpoint(
        &a.out,
        &merged,
        WriteOptions {
            strict_finite: true,
            ..WriteOptions::default()
        },
    )?;
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> anyhow::Result<()> {
    let map = WeightMap::open(&a.checkpoint)?;
    if a.json {
        let tensors: Vec<Value> = map
            .metas()
            .iter()
            .map(|m| json!({"name": m.name, "dtype": m.dtype.as_str(), "shape": m.shape}))
            .collect();
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({"tensors": tensors, "metadata": map.metadata()}))?
        );
    } else {
        for m in map.metas() {
            println!("{}\t{}\t{:?}", m.name, m.dtype, m.shape);
        }
        for (k, v) in map.metadata() {
            println!("# {k} = {v}");
        }
    }
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ToyExperimentConfig::from_json_file(p)?,
        None => ToyExperimentConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    log::info!("resolved experiment config: {}", serde_json::to_string(&cfg)?);
    let world = build_world(&cfg)?;
    let additive = additive_on(&world, &cfg)?;
    let comparison = comparison_on(&world, &cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let d = &a.out_dir;
    let paths = ["config.json", "additive.csv", "additive.json", "comparison.csv", "comparison.json"].map(|f| d.join(f));
    write_all(&[
        (&paths[0], cfg.to_json()),
        (&paths[1], additive.to_csv()),
        (&paths[2], additive.to_json()),
        (&paths[3], comparison.to_csv()),
        (&paths[4], comparison.to_json()),
    ])?;
    log::info!("wrote tables to {}", d.display());
    Ok(())
}
