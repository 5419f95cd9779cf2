use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use canopy::pipeline::{self, EstimateSource, PipelineError, RunConfig};
use canopy::segmentation::{EstimatorKind, DEFAULT_TAU};
use canopy::store::Store;

#[derive(Parser)]
#[command(
    name = "canopy",
    version,
    about = "Green-canopy coverage from aerial GeoTIFFs"
)]
struct Cli {
    /// Only print warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print container and page structure of a TIFF.
    Inspect { path: PathBuf },
    /// Tile inputs into chunks and report pixel coverage only.
    Tile(TileArgs),
    /// Tile, estimate canopy, and write coverage reports.
    Run(RunArgs),
    /// Rebuild coverage.csv and summary.json from stored manifests.
    Report {
        #[arg(long)]
        store: PathBuf,
        /// File names to include; defaults to every manifest in the store.
        files: Vec<String>,
    },
    /// Compare canopy estimates against a ground-truth percentage.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// 0-based page index of the RGB band.
    #[arg(long)]
    band: Option<usize>,
    #[arg(long)]
    chunk_size: Option<u32>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// TOML file with defaults; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Recompute even when a matching manifest exists.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TileArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EstimatorArg {
    Threshold,
    Mask,
    Boxes,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    /// Excess-green threshold for the threshold estimator.
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<i32>,
    /// Drop detections below this confidence (boxes estimator).
    #[arg(long)]
    confidence_floor: Option<f64>,
    /// Also write mask overlays for each chunk.
    #[arg(long)]
    overlays: bool,
    #[arg(long)]
    overlay_alpha: Option<f64>,
    /// Print a comparison of the run against this canopy percentage.
    #[arg(long)]
    ground_truth: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    ground_truth: f64,
    #[arg(long, default_value = "site")]
    site: String,
    /// NAME=PATH of a completed run (its store root or summary.json).
    #[arg(long = "run", value_parser = parse_pair)]
    runs: Vec<(String, String)>,
    /// NAME=PERCENT of an externally computed estimate.
    #[arg(long = "estimate", value_parser = parse_pair)]
    estimates: Vec<(String, String)>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_owned(), v.to_owned())),
        _ => Err(format!("expected NAME=VALUE, got {s:?}")),
    }
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    band: Option<usize>,
    chunk_size: Option<u32>,
    store: Option<PathBuf>,
    workers: Option<usize>,
    estimator: Option<EstimatorArg>,
    tau: Option<i32>,
    confidence_floor: Option<f64>,
    overlays: Option<bool>,
    overlay_alpha: Option<f64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, PipelineError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn base_config(common: &CommonArgs, file: &FileConfig) -> RunConfig {
    let store = common
        .store
        .clone()
        .or_else(|| file.store.clone())
        .unwrap_or_else(|| PathBuf::from("canopy-store"));
    let mut config = RunConfig::new(common.inputs.clone(), store);
    if let Some(b) = common.band.or(file.band) {
        config.band = b;
    }
    if let Some(c) = common.chunk_size.or(file.chunk_size) {
        config.chunk_size = c;
    }
    config.workers = common
        .workers
        .or(file.workers)
        .unwrap_or_else(default_workers);
    config.force = common.force;
    config
}

fn run_config(args: &RunArgs) -> Result<RunConfig, PipelineError> {
    let file = load_file_config(args.common.config.as_deref())?;
    let mut config = base_config(&args.common, &file);
    let tau = args.tau.or(file.tau).unwrap_or(DEFAULT_TAU);
    config.estimator = Some(
        match args
            .estimator
            .or(file.estimator)
            .unwrap_or(EstimatorArg::Threshold)
        {
            EstimatorArg::Threshold => EstimatorKind::Threshold { tau },
            EstimatorArg::Mask => EstimatorKind::MaskImport,
            EstimatorArg::Boxes => EstimatorKind::BoxImport,
        },
    );
    config.confidence_floor = args.confidence_floor.or(file.confidence_floor);
    config.overlays = args.overlays || file.overlays.unwrap_or(false);
    if let Some(a) = args.overlay_alpha.or(file.overlay_alpha) {
        config.overlay_alpha = a;
    }
    Ok(config)
}

fn tile_config(args: &TileArgs) -> Result<RunConfig, PipelineError> {
    let file = load_file_config(args.common.config.as_deref())?;
    let mut config = base_config(&args.common, &file);
    config.estimator = None;
    Ok(config)
}

fn execute(config: RunConfig, ground_truth: Option<f64>) -> Result<(), PipelineError> {
    let outcome = pipeline::run(&config)?;
    let stats = &outcome.stats;
    log::info!(
        "{} chunks ({} skipped), {} files resumed, {} segment reads",
        stats.chunks,
        stats.skipped_chunks,
        stats.resumed_files,
        stats.segment_reads
    );
    if config.estimator.is_some() {
        print!("{}", canopy::metrics::to_csv(&outcome.rows));
    } else {
        print!("{}", pipeline::tiling_csv(&outcome.rows));
    }
    if let Some(summary) = &outcome.summary {
        println!("area covered: {}%", summary.area_covered_display());
        if config.estimator.is_some() {
            println!("canopy: {}%", summary.canopy_display());
        }
        if let Some(a) = &summary.covered_area {
            println!(
                "covered area: {:.2} m2 ({:.4} acres)",
                a.square_meters, a.acres
            );
        }
        if let Some(a) = &summary.canopy_area {
            println!(
                "canopy area: {:.2} m2 ({:.4} acres)",
                a.square_meters, a.acres
            );
        }
    }
    if let (Some(gt), Some(kind)) = (ground_truth, config.estimator) {
        let (_, csv) = pipeline::compare(
            "site",
            gt,
            &[(
                kind.to_string(),
                EstimateSource::Run(config.store_root.clone()),
            )],
        )?;
        print!("{csv}");
    }
    match outcome.failures.into_iter().next() {
        None => Ok(()),
        Some(f) => {
            log::error!(
                "{} input(s) failed",
                config.input_paths.len() - outcome.rows.len()
            );
            Err(f.error)
        }
    }
}

fn compare(args: CompareArgs) -> Result<(), PipelineError> {
    let mut sources = Vec::new();
    for (name, path) in args.runs {
        sources.push((name, EstimateSource::Run(PathBuf::from(path))));
    }
    for (name, value) in args.estimates {
        let v: f64 = value.parse().map_err(|_| {
            PipelineError::Config(format!("estimate {name}: {value:?} is not a number"))
        })?;
        sources.push((name, EstimateSource::Value(v)));
    }
    let (_, csv) = pipeline::compare(&args.site, args.ground_truth, &sources)?;
    match args.out {
        Some(path) => std::fs::write(&path, csv)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Inspect { path } => {
            let report = pipeline::inspect(&path)?;
            print!("{report}");
            if report.all_pages_readable() {
                Ok(())
            } else {
                Err(PipelineError::Tiff(
                    report
                        .pages
                        .into_iter()
                        .find_map(Result::err)
                        .expect("a page failed"),
                ))
            }
        }
        Command::Tile(args) => execute(tile_config(&args)?, None),
        Command::Run(args) => {
            let gt = args.ground_truth;
            execute(run_config(&args)?, gt)
        }
        Command::Report { store, files } => {
            let store = Store::open(store);
            let rows = pipeline::report_from_store(&store, &files)?;
            print!("{}", canopy::metrics::to_csv(&rows));
            Ok(())
        }
        Command::Compare(args) => compare(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
