use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use fakesat::detector::{
    self, model_size_report, parse_hops, split_dataset, ChannelCount, ChannelId, DetectorConfig, DetectorModel,
    MetricsReport,
};
use fakesat::heatmap::{self, DEFAULT_STRIDE};
use fakesat::image_io::{load_dataset, load_tile, synth_dataset, Label, Perturbation, SynthParams, Tile};
use fakesat::robustness::run_grid;
use fakesat::{json, Error};

/// Environment variable that caps the worker thread count.
#[cfg(feature = "parallel")]
const THREADS_ENV: &str = "FAKESAT_THREADS";

#[derive(Parser)]
#[command(name = "fakesat", version, about = "Detect fake satellite image tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and evaluate it on the held-out test split.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset directory.
    Eval(EvalArgs),
    /// Render a fake-probability heat map for one tile.
    Heatmap(HeatmapArgs),
    /// Write a procedural real/fake dataset.
    Synth(SynthArgs),
    /// Print the parameter breakdown of a model.
    Size(SizeArgs),
    /// Train and test under every perturbation setting.
    Robustness(RobustnessArgs),
}

#[derive(Args)]
struct ModelConfigArgs {
    /// Comma-separated PixelHops (A = 2x2x3, B = 3x3x3, C = 4x4x3).
    #[arg(long, default_value = "B")]
    hops: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Candidate channel counts for the validation sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,8,all")]
    channel_grid: Vec<String>,
    #[arg(long, default_value_t = 48)]
    max_channels_per_hop: usize,
    /// Keep the classifiers of unselected channels for per-channel heat maps.
    #[arg(long)]
    retain_all_channels: bool,
}

impl ModelConfigArgs {
    fn config(&self) -> Result<DetectorConfig> {
        let channel_grid =
            self.channel_grid.iter().map(|s| s.parse::<ChannelCount>()).collect::<Result<Vec<_>, Error>>()?;
        let config = DetectorConfig {
            hops: parse_hops(&self.hops)?,
            max_channels_per_hop: self.max_channels_per_hop,
            channel_grid,
            seed: self.seed,
            retain_all_channels: self.retain_all_channels,
            ..DetectorConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelConfigArgs,
    /// none | resize:N | awgn:SIGMA | jpeg:Q, applied to every split.
    #[arg(long, default_value = "none")]
    perturb: String,
    /// Metrics report path (default: <out>.metrics.json).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Run manifest path (default: <out>.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate one part of the training split (recomputed from the model's seed).
    #[arg(long, value_enum, default_value = "all")]
    split: SplitChoice,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: usize,
    /// Single channel as HOP:K, e.g. B:26.
    #[arg(long)]
    channel: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON side-car with the raw score grid.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Tile side length in pixels.
    #[arg(long, default_value_t = SynthParams::default().size)]
    size: usize,
    /// Amplitude of the periodic pattern stamped on fake tiles.
    #[arg(long, default_value_t = SynthParams::default().pattern_amplitude)]
    pattern_amplitude: f64,
    /// Gaussian blur applied to fake tiles, in pixels.
    #[arg(long, default_value_t = SynthParams::default().blur_sigma)]
    blur_sigma: f64,
}

#[derive(Args)]
struct SizeArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelConfigArgs,
    /// Settings to run (default: the full grid).
    #[arg(long, value_delimiter = ',')]
    settings: Option<Vec<String>>,
    /// Report path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    command_line: Vec<String>,
    config: DetectorConfig,
    perturbation: Perturbation,
    seed: u64,
    dataset_hash: String,
    build_id: String,
    threads: usize,
    timings_s: BTreeMap<String, f64>,
}

fn build_id() -> String {
    format!("{}-{}+{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"), env!("FAKESAT_GIT_DESCRIBE"))
}

fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// SHA-256 over the sorted relative paths and contents of the dataset.
fn dataset_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    for sub in ["real", "fake"] {
        let dir = root.join(sub);
        if dir.is_dir() {
            for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
                let path = entry?.path();
                if path.is_file() {
                    files.push(path);
                }
            }
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(&json::to_vec(value)?)?;
    Ok(())
}

fn parse_perturbation(spec: &str, seed: u64) -> Result<Perturbation> {
    Ok(spec.parse::<Perturbation>()?.with_seed(seed))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut timings = BTreeMap::new();
    let config = args.model.config()?;
    let perturbation = parse_perturbation(&args.perturb, config.seed)?;

    let t = Instant::now();
    let dataset = load_dataset(&args.data)?;
    let hash = dataset_hash(&args.data)?;
    let tiles = perturbation.apply_all(&dataset.tiles)?;
    timings.insert("load".to_string(), t.elapsed().as_secs_f64());
    eprintln!("loaded {} tiles from {} ({perturbation})", tiles.len(), args.data.display());

    let t = Instant::now();
    let outcome = detector::train(&config, &tiles, perturbation)?;
    timings.insert("train".to_string(), t.elapsed().as_secs_f64());
    let model = &outcome.model;
    eprintln!(
        "selected {} channel(s): {}",
        model.n_channels(),
        model.selected.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
    );

    model.save(&args.out)?;
    let report = MetricsReport {
        split: "test".into(),
        tiles: outcome.split.test.len(),
        perturbation: perturbation.to_string(),
        metrics: outcome.test_metrics,
        model_size: model_size_report(model),
    };
    json::write_file(&args.metrics.unwrap_or_else(|| with_suffix(&args.out, ".metrics.json")), &report)?;
    let manifest = RunManifest {
        command_line: std::env::args().collect(),
        config: config.clone(),
        perturbation,
        seed: config.seed,
        dataset_hash: hash,
        build_id: build_id(),
        threads: threads(),
        timings_s: timings,
    };
    json::write_file(&args.manifest.unwrap_or_else(|| with_suffix(&args.out, ".manifest.json")), &manifest)?;
    eprintln!(
        "test F1 {:.4} (precision {:.4}, recall {:.4}); model written to {}",
        report.metrics.f1,
        report.metrics.precision,
        report.metrics.recall,
        args.out.display()
    );
    print_json(&report)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = DetectorModel::load(&args.model)?;
    let dataset = load_dataset(&args.data)?;
    let tiles = model.perturbation.apply_all(&dataset.tiles)?;
    let (name, chosen): (&str, Vec<&Tile>) = match args.split {
        SplitChoice::All => ("all", tiles.iter().collect()),
        choice => {
            let split = split_dataset(&tiles, model.config.split, model.config.seed)?;
            let (name, idx) = match choice {
                SplitChoice::Train => ("train", split.train),
                SplitChoice::Val => ("val", split.val),
                _ => ("test", split.test),
            };
            (name, idx.into_iter().map(|i| &tiles[i]).collect())
        }
    };
    if chosen.is_empty() {
        bail!("no tiles to evaluate in the {name} split");
    }
    let metrics = detector::evaluate(&chosen, &model)?;
    eprintln!(
        "{name}: {} tiles, F1 {:.4}, precision {:.4}, recall {:.4} (tp {} fp {} fn {} tn {})",
        chosen.len(),
        metrics.f1,
        metrics.precision,
        metrics.recall,
        metrics.tp,
        metrics.fp,
        metrics.fn_,
        metrics.tn
    );
    print_json(&MetricsReport {
        split: name.into(),
        tiles: chosen.len(),
        perturbation: model.perturbation.to_string(),
        metrics,
        model_size: model_size_report(&model),
    })
}

#[derive(Serialize)]
struct ScoreGrid<'a> {
    stride: usize,
    channel: Option<String>,
    height: usize,
    width: usize,
    scores: Vec<&'a [f64]>,
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<()> {
    let model = DetectorModel::load(&args.model)?;
    let tile = load_tile(&args.image, Label::Unknown)?;
    let tile = model.perturbation.apply(&tile)?;
    let map = match &args.channel {
        Some(spec) => heatmap::channel_heatmap(&tile, &model, spec.parse::<ChannelId>()?, args.stride)?,
        None => heatmap::compute_heatmap(&tile, &model, args.stride)?,
    };
    heatmap::render_png(&map, &args.out)?;
    if let Some(path) = &args.scores {
        let (height, width) = map.scores.dim();
        let grid = ScoreGrid {
            stride: map.stride,
            channel: map.channel.map(|c| c.to_string()),
            height,
            width,
            scores: map.scores.rows().into_iter().map(|r| r.to_slice().expect("standard layout")).collect(),
        };
        json::write_file(path, &grid)?;
    }
    eprintln!("heat map written to {}", args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let params = SynthParams {
        size: args.size,
        pattern_amplitude: args.pattern_amplitude,
        blur_sigma: args.blur_sigma,
        ..SynthParams::default()
    };
    synth_dataset(args.n, &args.out, args.seed, &params)?;
    eprintln!("wrote {} real and {} fake tiles to {}", args.n, args.n, args.out.display());
    Ok(())
}

fn cmd_size(args: SizeArgs) -> Result<()> {
    let model = DetectorModel::load(&args.model)?;
    let report = model_size_report(&model);
    eprintln!(
        "{}: {} channel(s), filters {}, channel-wise {}, ensemble {}, total {}",
        report.system,
        report.selected_channels,
        report.filter_params,
        report.channelwise_params,
        report.ensemble_params,
        report.total
    );
    print_json(&report)
}

fn cmd_robustness(args: RobustnessArgs) -> Result<()> {
    let config = args.model.config()?;
    let grid = match &args.settings {
        Some(specs) => specs.iter().map(|s| parse_perturbation(s, config.seed)).collect::<Result<Vec<_>>>()?,
        None => Perturbation::grid(config.seed),
    };
    let dataset = load_dataset(&args.data)?;
    let report = run_grid(&dataset.tiles, &config, &grid, |row, secs| {
        eprintln!("{:<12} F1 {:.4}  ({secs:.1} s)", row.setting, row.test.f1);
    })?;
    eprint!("{}", report.table());
    match &args.out {
        Some(path) => json::write_file(path, &report)?,
        None => print_json(&report)?,
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Size(a) => cmd_size(a),
        Command::Robustness(a) => cmd_robustness(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
