//! End-to-end processing: band selection, tiling, estimation, ledger, and
//! report emission. The CLI is a thin layer over this module.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, FileCoverageRow, MetricsError, OverallSummary};
use crate::segmentation::{self, EstimatorKind, SegmentationError};
use crate::store::{layout, Manifest, ManifestEntry, Store, StoreError};
use crate::tiff_reader::{
    self, CountingSource, FileSource, PageDescriptor, PixelScale, SegmentLayout, TiffError,
};
use crate::tiling::{self, ChunkRef, TilingError};

pub const TILING_REPORT_KEY: &str = "tiling.csv";
pub const DEFAULT_OVERLAY_ALPHA: f64 = 0.4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tiff(#[from] TiffError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no completed run at {0}")]
    MissingRun(PathBuf),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Coarse failure classes, each mapped to its own process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Parse,
    Store,
    Estimator,
    Other,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Other => 1,
            ErrorClass::Config => 2,
            ErrorClass::Parse => 3,
            ErrorClass::Store => 4,
            ErrorClass::Estimator => 5,
        }
    }
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::Config(_) | PipelineError::Tiling(_) => ErrorClass::Config,
            PipelineError::Tiff(_) => ErrorClass::Parse,
            PipelineError::Store(_) | PipelineError::Segmentation(SegmentationError::Store(_)) => {
                ErrorClass::Store
            }
            PipelineError::Segmentation(SegmentationError::TauOutOfRange(_)) => ErrorClass::Config,
            PipelineError::Segmentation(_) | PipelineError::MissingRun(_) => ErrorClass::Estimator,
            PipelineError::Metrics(_) | PipelineError::Pool(_) => ErrorClass::Other,
        }
    }

    /// Short error name for operator output.
    pub fn name(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "Config",
            PipelineError::Tiff(e) => e.name(),
            PipelineError::Tiling(TilingError::ZeroDimension { .. }) => "ZeroDimension",
            PipelineError::Tiling(TilingError::OutOfGrid { .. }) => "OutOfGrid",
            PipelineError::Store(StoreError::CorruptManifest { .. }) => "CorruptManifest",
            PipelineError::Store(_) => "IoFailure",
            PipelineError::Segmentation(e) => match e {
                SegmentationError::MaskMissing { .. } => "MaskMissing",
                SegmentationError::MaskShapeMismatch { .. } => "MaskShapeMismatch",
                SegmentationError::MalformedLine { .. } => "MalformedLine",
                SegmentationError::TauOutOfRange(_) => "TauOutOfRange",
                SegmentationError::Store(_) => "IoFailure",
            },
            PipelineError::Metrics(_) => "Metrics",
            PipelineError::MissingRun(_) => "MissingRun",
            PipelineError::Pool(_) => "Pool",
        }
    }
}

/// Parameters of one pipeline invocation.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub input_paths: Vec<PathBuf>,
    pub band: usize,
    pub chunk_size: u32,
    /// `None` tiles and accounts only.
    pub estimator: Option<EstimatorKind>,
    pub store_root: PathBuf,
    pub workers: usize,
    pub confidence_floor: Option<f64>,
    pub overlays: bool,
    pub overlay_alpha: f64,
    /// Ignore existing manifests and recompute everything.
    pub force: bool,
}

impl RunConfig {
    pub fn new(input_paths: Vec<PathBuf>, store_root: impl Into<PathBuf>) -> Self {
        RunConfig {
            input_paths,
            band: tiff_reader::DEFAULT_BAND,
            chunk_size: tiling::DEFAULT_CHUNK_SIZE,
            estimator: Some(EstimatorKind::Threshold {
                tau: segmentation::DEFAULT_TAU,
            }),
            store_root: store_root.into(),
            workers: 1,
            confidence_floor: None,
            overlays: false,
            overlay_alpha: DEFAULT_OVERLAY_ALPHA,
            force: false,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.input_paths.is_empty() {
            return bad("no input files".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.chunk_size == 0 {
            return bad("chunk size must be at least 1".into());
        }
        if let Some(e) = &self.estimator {
            e.validate()?;
        }
        if let Some(f) = self.confidence_floor {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("confidence floor {f} outside [0, 1]"));
            }
            if self.estimator != Some(EstimatorKind::BoxImport) {
                return bad("confidence floor only applies to the boxes estimator".into());
            }
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return bad(format!(
                "overlay alpha {} outside [0, 1]",
                self.overlay_alpha
            ));
        }
        if self.overlays && self.estimator.is_none() {
            return bad("overlays need an estimator".into());
        }
        let mut seen = HashSet::new();
        for p in &self.input_paths {
            let name = file_name_of(p)?;
            crate::store::validate_file_name(&name)?;
            if !seen.insert(name.clone()) {
                return bad(format!("two inputs share the file name {name:?}"));
            }
        }
        Ok(())
    }
}

/// Report key for a file: the input's file stem.
pub fn file_name_of(path: &Path) -> Result<String, PipelineError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| PipelineError::Config(format!("cannot name input {}", path.display())))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    pub chunks: u64,
    pub skipped_chunks: u64,
    /// Files answered from an existing manifest.
    pub resumed_files: u64,
    pub windows_decoded: u64,
    pub segment_reads: u64,
}

#[derive(Debug)]
pub struct FileFailure {
    pub path: PathBuf,
    pub error: PipelineError,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// Successful files, in input order.
    pub rows: Vec<FileCoverageRow>,
    pub summary: Option<OverallSummary>,
    pub failures: Vec<FileFailure>,
    pub stats: RunStats,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryReport {
    pub estimator: String,
    pub files: Vec<String>,
    #[serde(flatten)]
    pub summary: OverallSummary,
}

struct FileResult {
    row: FileCoverageRow,
    scale: Option<PixelScale>,
}

/// Runs the pipeline over every input and writes manifests and reports.
/// Per-file failures are collected; only configuration problems abort early.
pub fn run(config: &RunConfig) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let store = Store::open(&config.store_root);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;

    let mut stats = RunStats::default();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for path in &config.input_paths {
        match process_file(path, config, &store, &pool, &mut stats) {
            Ok(r) => results.push(r),
            Err(error) => {
                log::error!("{}: {error}", path.display());
                failures.push(FileFailure {
                    path: path.clone(),
                    error,
                });
            }
        }
    }

    let rows: Vec<FileCoverageRow> = results.iter().map(|r| r.row.clone()).collect();
    let summary = if rows.is_empty() {
        None
    } else {
        let mut summary = metrics::aggregate(&rows)?;
        if results.iter().all(|r| r.scale.is_some()) {
            let area = |count: fn(&FileCoverageRow) -> u64| {
                results
                    .iter()
                    .map(|r| metrics::pixels_to_area(count(&r.row), r.scale.as_ref()))
                    .reduce(|a, b| Ok(a? + b?))
                    .expect("non-empty")
            };
            summary.covered_area = Some(area(|r| r.covered_pixels)?);
            if config.estimator.is_some() {
                summary.canopy_area = Some(area(|r| r.segmentation_pixels)?);
            }
        }
        Some(summary)
    };

    match (&config.estimator, &summary) {
        (Some(kind), Some(summary)) => {
            store.put(layout::REPORT_KEY, metrics::to_csv(&rows).as_bytes())?;
            write_summary(&store, &kind.to_string(), &rows, summary)?;
        }
        (None, Some(_)) => {
            store.put(TILING_REPORT_KEY, tiling_csv(&rows).as_bytes())?;
        }
        _ => {}
    }

    Ok(RunOutcome {
        rows,
        summary,
        failures,
        stats,
    })
}

fn write_summary(
    store: &Store,
    estimator: &str,
    rows: &[FileCoverageRow],
    summary: &OverallSummary,
) -> Result<(), PipelineError> {
    let report = SummaryReport {
        estimator: estimator.to_owned(),
        files: rows.iter().map(|r| r.file_name.clone()).collect(),
        summary: summary.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&report).expect("summary serializes");
    json.push(b'\n');
    store.put(layout::SUMMARY_KEY, &json)?;
    Ok(())
}

/// `fileName,totalPixels,coveredPixels,coverPercentage`, for tiling-only runs.
pub fn tiling_csv(rows: &[FileCoverageRow]) -> String {
    let mut out = String::from("fileName,totalPixels,coveredPixels,coverPercentage\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.file_name,
            r.total_pixels,
            r.covered_pixels,
            metrics::format_percent(r.covered_pixels, r.total_pixels)
        );
    }
    out
}

fn manifest_matches(
    m: &Manifest,
    page: &PageDescriptor,
    config: &RunConfig,
    estimator: &Option<String>,
) -> bool {
    m.page_index == page.index
        && (m.page_width, m.page_height) == (page.width, page.height)
        && m.chunk_size == config.chunk_size
        && &m.estimator == estimator
}

fn process_file(
    path: &Path,
    config: &RunConfig,
    store: &Store,
    pool: &rayon::ThreadPool,
    stats: &mut RunStats,
) -> Result<FileResult, PipelineError> {
    let file_name = file_name_of(path)?;
    let container = tiff_reader::open_container(path)?;
    let page = tiff_reader::select_band(&container, config.band)?;
    let grid = tiling::plan_grid(page.width, page.height, config.chunk_size)?;
    let estimator = config.estimator.map(|e| e.to_string());

    if !config.force {
        match store.read_manifest(&file_name) {
            Ok(Some(m)) if manifest_matches(&m, &page, config, &estimator) => {
                log::info!("{file_name}: complete manifest found, skipping decode");
                stats.resumed_files += 1;
                stats.chunks += m.entries.len() as u64;
                stats.skipped_chunks += m.entries.iter().filter(|e| e.skipped).count() as u64;
                let account = m.account();
                let row = FileCoverageRow {
                    file_name: file_name.clone(),
                    total_pixels: account.total_pixels,
                    covered_pixels: account.covered_pixels,
                    segmentation_pixels: m.segmentation_pixels().unwrap_or(0),
                };
                write_file_report(store, &row, config)?;
                return Ok(FileResult {
                    row,
                    scale: page.geo_scale,
                });
            }
            Ok(_) => {}
            Err(e) => log::warn!("{file_name}: ignoring unreadable manifest: {e}"),
        }
    }

    log::info!(
        "{file_name}: page {} {}x{} ({}), {} chunks of {}px",
        page.index,
        page.width,
        page.height,
        match page.layout {
            SegmentLayout::Strips { .. } => "strips",
            SegmentLayout::Tiles { .. } => "tiles",
        },
        grid.len(),
        grid.chunk_size
    );
    let source = CountingSource::new(FileSource::open(path).map_err(TiffError::from)?);
    let refs: Vec<ChunkRef> = grid.refs(&file_name).collect();
    let done = AtomicU64::new(0);
    let total = refs.len() as u64;
    let entries: Vec<ManifestEntry> = pool.install(|| {
        refs.into_par_iter()
            .map(|r| {
                let entry = process_chunk(&page, &source, store, r, config);
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                if n.is_multiple_of(1000) || n == total {
                    log::info!("{file_name}: {n}/{total} chunks");
                }
                entry
            })
            .collect::<Result<Vec<_>, PipelineError>>()
    })?;

    stats.chunks += entries.len() as u64;
    stats.skipped_chunks += entries.iter().filter(|e| e.skipped).count() as u64;
    stats.windows_decoded += entries.len() as u64;
    stats.segment_reads += source.reads();

    let accounts: Vec<_> = entries
        .iter()
        .map(|e| tiling::PixelAccount {
            total_pixels: e.in_width as u64 * e.in_height as u64,
            covered_pixels: e.covered_pixels,
        })
        .collect();
    let canopy: Vec<u64> = entries
        .iter()
        .map(|e| e.segmentation_pixels.unwrap_or(0))
        .collect();
    let row = metrics::file_report(&file_name, &accounts, &canopy)?;

    let manifest = Manifest {
        file_name: file_name.clone(),
        page_index: page.index,
        page_width: page.width,
        page_height: page.height,
        chunk_size: grid.chunk_size,
        rows: grid.rows,
        cols: grid.cols,
        estimator,
        geo_scale: page.geo_scale,
        entries,
    };
    store.write_manifest(&manifest)?;
    write_file_report(store, &row, config)?;
    Ok(FileResult {
        row,
        scale: page.geo_scale,
    })
}

fn write_file_report(
    store: &Store,
    row: &FileCoverageRow,
    config: &RunConfig,
) -> Result<(), PipelineError> {
    let body = match config.estimator {
        Some(_) => metrics::to_csv(std::slice::from_ref(row)),
        None => tiling_csv(std::slice::from_ref(row)),
    };
    store.put(&layout::file_report_key(&row.file_name)?, body.as_bytes())?;
    Ok(())
}

fn process_chunk(
    page: &PageDescriptor,
    source: &CountingSource<FileSource>,
    store: &Store,
    chunk_ref: ChunkRef,
    config: &RunConfig,
) -> Result<ManifestEntry, PipelineError> {
    let chunk = tiling::extract_chunk_from(page, source, chunk_ref)?;
    let account = tiling::account_chunk(&chunk);
    let r = &chunk.chunk_ref;
    let mut entry = ManifestEntry {
        row: r.row,
        col: r.col,
        in_width: r.in_width,
        in_height: r.in_height,
        covered_pixels: account.covered_pixels,
        segmentation_pixels: config.estimator.map(|_| 0),
        skipped: account.covered_pixels == 0,
    };
    if entry.skipped {
        return Ok(entry);
    }
    store.write_chunk(&chunk)?;

    let mask = match config.estimator {
        None => return Ok(entry),
        Some(EstimatorKind::Threshold { tau }) => segmentation::segment_threshold(&chunk, tau),
        Some(EstimatorKind::MaskImport) => segmentation::import_mask(store, r)?,
        Some(EstimatorKind::BoxImport) => {
            // A detector writes no file for a chunk without detections.
            let text = store.read_detections(r)?.unwrap_or_default();
            let boxes = segmentation::parse_detections(&text)?;
            let boxes = segmentation::filter_by_confidence(boxes, config.confidence_floor);
            segmentation::rasterize_boxes(&boxes, r)
        }
    };
    entry.segmentation_pixels = Some(metrics::canopy_count(&mask, &chunk)?);
    if config.overlays {
        store.write_overlay(&chunk, &mask, config.overlay_alpha)?;
    }
    Ok(entry)
}

/// Rebuilds `coverage.csv` and `summary.json` from stored manifests without
/// decoding any imagery. With no names given, every manifest under the root is used.
pub fn report_from_store(
    store: &Store,
    file_names: &[String],
) -> Result<Vec<FileCoverageRow>, PipelineError> {
    let names: Vec<String> = if file_names.is_empty() {
        let mut found = Vec::new();
        let entries = std::fs::read_dir(store.root()).map_err(|source| StoreError::Io {
            key: String::new(),
            source,
        })?;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().join("manifest.json").is_file() {
                found.push(name);
            }
        }
        found.sort();
        found
    } else {
        file_names.to_vec()
    };

    let mut rows = Vec::new();
    let mut estimators = Vec::new();
    let mut scales = Vec::new();
    for name in &names {
        let key = layout::manifest_key(name)?;
        let m = store
            .read_manifest(name)?
            .ok_or_else(|| PipelineError::MissingRun(store.path_of(&key)))?;
        let Some(seg) = m.segmentation_pixels() else {
            return Err(PipelineError::Config(format!(
                "{name}: manifest comes from a tiling-only run"
            )));
        };
        let account = m.account();
        rows.push(FileCoverageRow {
            file_name: name.clone(),
            total_pixels: account.total_pixels,
            covered_pixels: account.covered_pixels,
            segmentation_pixels: seg,
        });
        estimators.push(m.estimator.clone().unwrap_or_default());
        scales.push(m.geo_scale);
    }
    let mut summary = metrics::aggregate(&rows)?;
    if scales.iter().all(Option::is_some) {
        let area = |pick: fn(&FileCoverageRow) -> u64| -> Result<metrics::Area, MetricsError> {
            rows.iter()
                .zip(&scales)
                .map(|(r, s)| metrics::pixels_to_area(pick(r), s.as_ref()))
                .reduce(|a, b| Ok(a? + b?))
                .expect("non-empty")
        };
        summary.covered_area = Some(area(|r| r.covered_pixels)?);
        summary.canopy_area = Some(area(|r| r.segmentation_pixels)?);
    }
    estimators.dedup();
    let estimator = if estimators.len() == 1 {
        estimators.remove(0)
    } else {
        "mixed".to_owned()
    };
    store.put(layout::REPORT_KEY, metrics::to_csv(&rows).as_bytes())?;
    write_summary(store, &estimator, &rows, &summary)?;
    Ok(rows)
}

/// Where a comparison estimate comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum EstimateSource {
    /// A literal percentage.
    Value(f64),
    /// A completed run: a `summary.json` file or a store root holding one.
    Run(PathBuf),
}

/// Reads the canopy percentage of a completed run.
pub fn load_run_percent(path: &Path) -> Result<f64, PipelineError> {
    let file = if path.is_dir() {
        path.join(layout::SUMMARY_KEY)
    } else {
        path.to_path_buf()
    };
    let bytes = std::fs::read(&file).map_err(|_| PipelineError::MissingRun(file.clone()))?;
    let report: SummaryReport = serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", file.display())))?;
    report
        .summary
        .canopy_percent
        .ok_or(PipelineError::MissingRun(file))
}

/// Builds the comparison row for one site and renders it as CSV.
pub fn compare(
    site_name: &str,
    ground_truth_percent: f64,
    estimates: &[(String, EstimateSource)],
) -> Result<(metrics::ComparisonRow, String), PipelineError> {
    let mut values = Vec::with_capacity(estimates.len());
    for (name, src) in estimates {
        let v = match src {
            EstimateSource::Value(v) => *v,
            EstimateSource::Run(p) => load_run_percent(p)?,
        };
        values.push((name.clone(), v));
    }
    let row = metrics::compare_estimates(site_name, ground_truth_percent, values)?;
    let csv = metrics::comparison_csv(std::slice::from_ref(&row));
    Ok((row, csv))
}

/// Container and page summary printed by `inspect`.
pub struct Inspection {
    pub container: tiff_reader::ContainerInfo,
    pub pages: Vec<Result<PageDescriptor, TiffError>>,
}

pub fn inspect(path: &Path) -> Result<Inspection, TiffError> {
    let container = tiff_reader::open_container(path)?;
    let pages = (0..container.page_count())
        .map(|i| tiff_reader::read_page(&container, i))
        .collect();
    Ok(Inspection { container, pages })
}

impl Inspection {
    pub fn all_pages_readable(&self) -> bool {
        self.pages.iter().all(Result::is_ok)
    }
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.container;
        writeln!(f, "file: {}", c.path.display())?;
        writeln!(f, "variant: {}", c.variant.as_str())?;
        writeln!(
            f,
            "byte order: {}",
            match c.byte_order {
                tiff_reader::ByteOrder::Little => "little",
                tiff_reader::ByteOrder::Big => "big",
            }
        )?;
        writeln!(f, "pages: {}", c.page_count())?;
        for (i, page) in self.pages.iter().enumerate() {
            match page {
                Ok(p) => {
                    let layout = match p.layout {
                        SegmentLayout::Strips { rows_per_strip } => {
                            format!("strips(rows={rows_per_strip})")
                        }
                        SegmentLayout::Tiles {
                            tile_width,
                            tile_height,
                        } => format!("tiles({tile_width}x{tile_height})"),
                    };
                    let scale = p
                        .geo_scale
                        .map(|s| format!("{}x{} m/px", s.sx, s.sy))
                        .unwrap_or_else(|| "none".into());
                    writeln!(
                        f,
                        "  page {i}: {}x{}, {} samples, {}, {layout}, {} segments{}, scale {scale}",
                        p.width,
                        p.height,
                        p.samples_per_pixel,
                        p.compression.as_str(),
                        p.segment_offsets.len(),
                        if p.horizontal_predictor {
                            ", predictor"
                        } else {
                            ""
                        },
                    )?;
                }
                Err(e) => writeln!(f, "  page {i}: {}: {e}", e.name())?,
            }
        }
        Ok(())
    }
}
