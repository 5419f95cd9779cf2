//! Coverage ledger rows, overall aggregation, ground-truth comparison and
//! pixel-to-area conversion.
//!
//! All tallies are exact integers; percentages are derived on demand and
//! rounded only when rendered.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::CanopyMask;
use crate::tiff_reader::PixelScale;
use crate::tiling::{is_covered, PaddedChunk, PixelAccount};

/// Square meters in one international acre.
pub const SQUARE_METERS_PER_ACRE: f64 = 4_046.856_422_4;

pub const CSV_HEADER: &str =
    "fileName,totalPixels,coveredPixels,segmentationPixels,coverPercentage,segmentationPercentage";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mask and chunk refer to different cells")]
    RefMismatch,
    #[error("{accounts} chunk accounts but {counts} canopy counts")]
    MisalignedInputs { accounts: usize, counts: usize },
    #[error("canopy pixels {canopy} exceed covered pixels {covered}")]
    CanopyExceedsCovered { canopy: u64, covered: u64 },
    #[error("no rows to aggregate")]
    EmptyInput,
    #[error("percentage {0} outside [0, 100]")]
    PercentOutOfRange(f64),
    #[error("page has no pixel scale; physical area unavailable")]
    MissingScale,
}

/// Pixels that are mask-true, in-bounds, and covered.
pub fn canopy_count(mask: &CanopyMask, chunk: &PaddedChunk) -> Result<u64, MetricsError> {
    if mask.chunk_ref != chunk.chunk_ref {
        return Err(MetricsError::RefMismatch);
    }
    let r = &chunk.chunk_ref;
    let size = r.chunk_size as usize;
    let mut n = 0;
    for y in 0..r.in_height as usize {
        let px_row = &chunk.pixels()[y * size * 3..(y * size + r.in_width as usize) * 3];
        let mask_row = &mask.bits()[y * size..y * size + r.in_width as usize];
        n += px_row
            .chunks_exact(3)
            .zip(mask_row)
            .filter(|(px, &m)| m && is_covered(px))
            .count() as u64;
    }
    Ok(n)
}

/// `100·num/den`, or `None` when `den` is zero.
pub fn percent(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Exact `100·num/den` rounded half-up to two decimals, or `"NaN"` when `den` is zero.
pub fn format_percent(num: u64, den: u64) -> String {
    if den == 0 {
        return "NaN".to_owned();
    }
    // hundredths = floor(10000·num/den + 1/2), computed without floating point.
    let hundredths = (20_000 * num as u128 + den as u128) / (2 * den as u128);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// One input file's line in the coverage report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileCoverageRow {
    pub file_name: String,
    pub total_pixels: u64,
    pub covered_pixels: u64,
    pub segmentation_pixels: u64,
}

impl FileCoverageRow {
    pub fn cover_percentage(&self) -> Option<f64> {
        percent(self.covered_pixels, self.total_pixels)
    }

    /// Undefined when nothing is covered.
    pub fn segmentation_percentage(&self) -> Option<f64> {
        percent(self.segmentation_pixels, self.covered_pixels)
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.file_name,
            self.total_pixels,
            self.covered_pixels,
            self.segmentation_pixels,
            format_percent(self.covered_pixels, self.total_pixels),
            format_percent(self.segmentation_pixels, self.covered_pixels),
        )
    }
}

/// Sums per-chunk accounts and canopy counts for one file.
pub fn file_report(
    file_name: &str,
    accounts: &[PixelAccount],
    canopy_counts: &[u64],
) -> Result<FileCoverageRow, MetricsError> {
    if accounts.len() != canopy_counts.len() {
        return Err(MetricsError::MisalignedInputs {
            accounts: accounts.len(),
            counts: canopy_counts.len(),
        });
    }
    let account: PixelAccount = accounts.iter().copied().sum();
    let canopy: u64 = canopy_counts.iter().sum();
    if canopy > account.covered_pixels {
        return Err(MetricsError::CanopyExceedsCovered {
            canopy,
            covered: account.covered_pixels,
        });
    }
    Ok(FileCoverageRow {
        file_name: file_name.to_owned(),
        total_pixels: account.total_pixels,
        covered_pixels: account.covered_pixels,
        segmentation_pixels: canopy,
    })
}

/// Renders rows as the coverage CSV, header included.
pub fn to_csv(rows: &[FileCoverageRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Physical area of a pixel count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Area {
    pub square_meters: f64,
    pub acres: f64,
}

impl std::ops::Add for Area {
    type Output = Area;

    fn add(self, rhs: Area) -> Area {
        Area {
            square_meters: self.square_meters + rhs.square_meters,
            acres: self.acres + rhs.acres,
        }
    }
}

pub fn pixels_to_area(count: u64, scale: Option<&PixelScale>) -> Result<Area, MetricsError> {
    let scale = scale.ok_or(MetricsError::MissingScale)?;
    let square_meters = count as f64 * scale.sx * scale.sy;
    Ok(Area {
        square_meters,
        acres: square_meters / SQUARE_METERS_PER_ACRE,
    })
}

/// Totals across all files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OverallSummary {
    pub total_pixels: u64,
    pub covered_pixels: u64,
    pub segmentation_pixels: u64,
    pub area_covered_percent: Option<f64>,
    pub canopy_percent: Option<f64>,
    /// Covered and canopy ground area, present when every file carried a pixel scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered_area: Option<Area>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canopy_area: Option<Area>,
}

impl OverallSummary {
    /// Headline percentages rendered at two decimals.
    pub fn area_covered_display(&self) -> String {
        format_percent(self.covered_pixels, self.total_pixels)
    }

    pub fn canopy_display(&self) -> String {
        format_percent(self.segmentation_pixels, self.covered_pixels)
    }
}

/// Ratios of integer sums; never the mean of row percentages.
pub fn aggregate(rows: &[FileCoverageRow]) -> Result<OverallSummary, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let total_pixels = rows.iter().map(|r| r.total_pixels).sum();
    let covered_pixels = rows.iter().map(|r| r.covered_pixels).sum();
    let segmentation_pixels = rows.iter().map(|r| r.segmentation_pixels).sum();
    Ok(OverallSummary {
        total_pixels,
        covered_pixels,
        segmentation_pixels,
        area_covered_percent: percent(covered_pixels, total_pixels),
        canopy_percent: percent(segmentation_pixels, covered_pixels),
        covered_area: None,
        canopy_area: None,
    })
}

/// Estimates for one validation site against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComparisonRow {
    pub site_name: String,
    pub ground_truth_percent: f64,
    pub estimates: BTreeMap<String, f64>,
}

impl ComparisonRow {
    /// estimate − ground truth, per estimator.
    pub fn deltas(&self) -> BTreeMap<String, f64> {
        self.estimates
            .iter()
            .map(|(k, v)| (k.clone(), v - self.ground_truth_percent))
            .collect()
    }
}

pub const COMPARISON_HEADER: &str = "siteName,estimator,groundTruthPercent,estimatePercent,delta";

pub fn compare_estimates(
    site_name: &str,
    ground_truth_percent: f64,
    estimates: impl IntoIterator<Item = (String, f64)>,
) -> Result<ComparisonRow, MetricsError> {
    let in_range = |p: f64| (0.0..=100.0).contains(&p);
    if !in_range(ground_truth_percent) {
        return Err(MetricsError::PercentOutOfRange(ground_truth_percent));
    }
    let mut map = BTreeMap::new();
    for (name, p) in estimates {
        if !in_range(p) {
            return Err(MetricsError::PercentOutOfRange(p));
        }
        map.insert(name, p);
    }
    Ok(ComparisonRow {
        site_name: site_name.to_owned(),
        ground_truth_percent,
        estimates: map,
    })
}

/// One line per estimator: site, estimator, ground truth, estimate, signed delta.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    out.push_str(COMPARISON_HEADER);
    out.push('\n');
    for row in rows {
        for (name, delta) in row.deltas() {
            let _ = writeln!(
                out,
                "{},{},{:.2},{:.2},{:+.2}",
                row.site_name, name, row.ground_truth_percent, row.estimates[&name], delta
            );
        }
    }
    out
}
