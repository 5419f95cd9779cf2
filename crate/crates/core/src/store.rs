//! Artifact store: chunk images, masks, detections, overlays, manifests and
//! reports under a deterministic key layout.
//!
//! ```text
//! <root>/<fileName>/chunks/r00003_c00012.png
//!                  /masks/r00003_c00012.png
//!                  /detections/r00003_c00012.txt
//!                  /overlays/r00003_c00012.png
//!                  /reports/coverage.csv
//!                  /manifest.json
//! <root>/coverage.csv
//! <root>/summary.json
//! ```

use std::fs;
use std::io::{Cursor, ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::CanopyMask;
use crate::tiff_reader::PixelScale;
use crate::tiling::{ChunkGrid, ChunkRef, PaddedChunk, PixelAccount};

/// Largest row/column index expressible in an artifact name.
pub const MAX_INDEX: u32 = 99_999;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{key}: {source}")]
    Io {
        key: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid file name {0:?}")]
    InvalidName(String),
    #[error("chunk index ({row}, {col}) exceeds {MAX_INDEX}")]
    IndexTooLarge { row: u32, col: u32 },
    #[error("{key}: image codec error: {message}")]
    Image { key: String, message: String },
    #[error("{key}: expected a {expected}x{expected} image, found {width}x{height}")]
    ImageShape {
        key: String,
        expected: u32,
        width: u32,
        height: u32,
    },
    #[error("corrupt manifest {key}: {reason}")]
    CorruptManifest { key: String, reason: String },
    #[error("mask and chunk refer to different cells")]
    RefMismatch,
    #[error("overlay alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
}

/// Minimal object-store interface; the filesystem is the only backend here.
pub trait ObjectStore: Send + Sync {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError>;
    /// `Ok(None)` when the key does not exist.
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError>;
    fn exists(&self, key: &str) -> Result<bool, StoreError>;
}

pub struct FsStore {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, key: &str) -> PathBuf {
        key.split('/')
            .fold(self.root.clone(), |p, part| p.join(part))
    }
}

fn io_err(key: &str) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        key: key.to_owned(),
        source,
    }
}

impl ObjectStore for FsStore {
    /// Writes to a sibling temp file and renames it into place, so readers
    /// see either the old object, no object, or the complete new one.
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.path_of(key);
        let dir = path.parent().expect("keys have a parent");
        fs::create_dir_all(dir).map_err(io_err(key))?;
        let tmp = dir.join(format!(
            ".{}.tmp.{}.{}",
            path.file_name().unwrap().to_string_lossy(),
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.flush()?;
            drop(f);
            fs::rename(&tmp, &path)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result.map_err(io_err(key))
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        match fs::read(self.path_of(key)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(key)(e)),
        }
    }

    fn exists(&self, key: &str) -> Result<bool, StoreError> {
        self.path_of(key).try_exists().map_err(io_err(key))
    }
}

/// `r<RRRRR>_c<CCCCC>`
pub fn chunk_name(row: u32, col: u32) -> Result<String, StoreError> {
    if row > MAX_INDEX || col > MAX_INDEX {
        return Err(StoreError::IndexTooLarge { row, col });
    }
    Ok(format!("r{row:05}_c{col:05}"))
}

/// Inverse of [`chunk_name`].
pub fn parse_chunk_name(name: &str) -> Option<(u32, u32)> {
    let rest = name.strip_prefix('r')?;
    let (row, col) = rest.split_once("_c")?;
    let digits = |s: &str| s.len() == 5 && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(row) || !digits(col) {
        return None;
    }
    Some((row.parse().ok()?, col.parse().ok()?))
}

pub fn validate_file_name(name: &str) -> Result<(), StoreError> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && !name.contains(['/', '\\'])
        && !matches!(name, "coverage.csv" | "summary.json" | "tiling.csv");
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidName(name.to_owned()))
    }
}

/// Key construction for every artifact kind.
pub mod layout {
    use super::*;

    fn artifact(r: &ChunkRef, dir: &str, ext: &str) -> Result<String, StoreError> {
        validate_file_name(&r.file_name)?;
        Ok(format!(
            "{}/{dir}/{}.{ext}",
            r.file_name,
            chunk_name(r.row, r.col)?
        ))
    }

    pub fn chunk_key(r: &ChunkRef) -> Result<String, StoreError> {
        artifact(r, "chunks", "png")
    }

    pub fn mask_key(r: &ChunkRef) -> Result<String, StoreError> {
        artifact(r, "masks", "png")
    }

    pub fn detections_key(r: &ChunkRef) -> Result<String, StoreError> {
        artifact(r, "detections", "txt")
    }

    pub fn overlay_key(r: &ChunkRef) -> Result<String, StoreError> {
        artifact(r, "overlays", "png")
    }

    pub fn manifest_key(file_name: &str) -> Result<String, StoreError> {
        validate_file_name(file_name)?;
        Ok(format!("{file_name}/manifest.json"))
    }

    pub fn file_report_key(file_name: &str) -> Result<String, StoreError> {
        validate_file_name(file_name)?;
        Ok(format!("{file_name}/reports/coverage.csv"))
    }

    pub const REPORT_KEY: &str = "coverage.csv";
    pub const SUMMARY_KEY: &str = "summary.json";
}

/// Per-file audit record of the grid and every chunk's tallies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub file_name: String,
    pub page_index: usize,
    pub page_width: u32,
    pub page_height: u32,
    pub chunk_size: u32,
    pub rows: u32,
    pub cols: u32,
    /// Estimator that produced `segmentationPixels`; absent for tiling-only runs.
    pub estimator: Option<String>,
    pub geo_scale: Option<PixelScale>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ManifestEntry {
    pub row: u32,
    pub col: u32,
    pub in_width: u32,
    pub in_height: u32,
    pub covered_pixels: u64,
    pub segmentation_pixels: Option<u64>,
    pub skipped: bool,
}

impl Manifest {
    pub fn account(&self) -> PixelAccount {
        self.entries
            .iter()
            .map(|e| PixelAccount {
                total_pixels: e.in_width as u64 * e.in_height as u64,
                covered_pixels: e.covered_pixels,
            })
            .sum()
    }

    /// Sum of canopy pixels, or `None` when no estimator ran.
    pub fn segmentation_pixels(&self) -> Option<u64> {
        self.estimator.as_ref()?;
        Some(
            self.entries
                .iter()
                .filter_map(|e| e.segmentation_pixels)
                .sum(),
        )
    }

    pub fn grid(&self) -> ChunkGrid {
        ChunkGrid {
            page_width: self.page_width,
            page_height: self.page_height,
            chunk_size: self.chunk_size,
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Checks the structural invariants a reader relies on.
    pub fn validate(&self) -> Result<(), String> {
        let grid = crate::tiling::plan_grid(self.page_width, self.page_height, self.chunk_size)
            .map_err(|e| e.to_string())?;
        if (grid.rows, grid.cols) != (self.rows, self.cols) {
            return Err(format!(
                "grid {}x{} does not match page {}x{} at chunk size {}",
                self.rows, self.cols, self.page_width, self.page_height, self.chunk_size
            ));
        }
        if self.entries.len() != grid.len() {
            return Err(format!(
                "{} entries for a {}x{} grid",
                self.entries.len(),
                self.rows,
                self.cols
            ));
        }
        for (e, r) in self.entries.iter().zip(grid.refs(&self.file_name)) {
            if (e.row, e.col, e.in_width, e.in_height) != (r.row, r.col, r.in_width, r.in_height) {
                return Err(format!(
                    "entry ({}, {}) out of order or mis-sized",
                    e.row, e.col
                ));
            }
            if e.covered_pixels > r.in_bounds_pixels() {
                return Err(format!(
                    "entry ({}, {}) covers more than its extent",
                    e.row, e.col
                ));
            }
            if e.skipped != (e.covered_pixels == 0) {
                return Err(format!(
                    "entry ({}, {}) skip flag inconsistent",
                    e.row, e.col
                ));
            }
            if e.segmentation_pixels.is_some_and(|s| s > e.covered_pixels) {
                return Err(format!(
                    "entry ({}, {}) canopy exceeds covered",
                    e.row, e.col
                ));
            }
        }
        Ok(())
    }
}

/// Typed access to an [`ObjectStore`] using the artifact layout.
pub struct Store<B: ObjectStore = FsStore> {
    backend: B,
}

impl Store<FsStore> {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Store {
            backend: FsStore::new(root),
        }
    }

    pub fn path_of(&self, key: &str) -> PathBuf {
        self.backend.path_of(key)
    }

    pub fn root(&self) -> &Path {
        self.backend.root()
    }
}

impl<B: ObjectStore> Store<B> {
    pub fn with_backend(backend: B) -> Self {
        Store { backend }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.backend.put(key, bytes)
    }

    pub fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        self.backend.get(key)
    }

    /// Stores the padded chunk as a `chunk_size`² RGB PNG.
    pub fn write_chunk(&self, chunk: &PaddedChunk) -> Result<String, StoreError> {
        let key = layout::chunk_key(&chunk.chunk_ref)?;
        let png = encode_png(&key, chunk.pixels(), chunk.size(), ExtendedColorType::Rgb8)?;
        self.put(&key, &png)?;
        Ok(key)
    }

    /// Reads back a stored chunk; `Ok(None)` when it was never written.
    pub fn read_chunk(&self, chunk_ref: &ChunkRef) -> Result<Option<PaddedChunk>, StoreError> {
        let key = layout::chunk_key(chunk_ref)?;
        let Some(bytes) = self.get(&key)? else {
            return Ok(None);
        };
        let img = decode_png(&key, &bytes)?.into_rgb8();
        check_shape(&key, chunk_ref.chunk_size, img.width(), img.height())?;
        Ok(Some(PaddedChunk::from_pixels(
            chunk_ref.clone(),
            img.into_raw(),
        )))
    }

    /// Stores a mask as single-channel 8-bit PNG, 255 for canopy.
    pub fn write_mask(&self, mask: &CanopyMask) -> Result<String, StoreError> {
        let key = layout::mask_key(&mask.chunk_ref)?;
        let gray: Vec<u8> = mask
            .bits()
            .iter()
            .map(|&b| if b { 255 } else { 0 })
            .collect();
        let png = encode_png(&key, &gray, mask.size(), ExtendedColorType::L8)?;
        self.put(&key, &png)?;
        Ok(key)
    }

    /// Raw mask image as (width, height, luma bytes); `Ok(None)` when missing.
    pub fn read_mask_image(
        &self,
        chunk_ref: &ChunkRef,
    ) -> Result<Option<(u32, u32, Vec<u8>)>, StoreError> {
        let key = layout::mask_key(chunk_ref)?;
        let Some(bytes) = self.get(&key)? else {
            return Ok(None);
        };
        let img = decode_png(&key, &bytes)?.into_luma8();
        Ok(Some((img.width(), img.height(), img.into_raw())))
    }

    pub fn write_detections(&self, chunk_ref: &ChunkRef, text: &str) -> Result<String, StoreError> {
        let key = layout::detections_key(chunk_ref)?;
        self.put(&key, text.as_bytes())?;
        Ok(key)
    }

    /// Detection text for a chunk; `Ok(None)` when the detector wrote no file.
    pub fn read_detections(&self, chunk_ref: &ChunkRef) -> Result<Option<String>, StoreError> {
        let key = layout::detections_key(chunk_ref)?;
        Ok(self
            .get(&key)?
            .map(|b| String::from_utf8_lossy(&b).into_owned()))
    }

    /// Blends canopy pixels toward pure green and stores the result.
    pub fn write_overlay(
        &self,
        chunk: &PaddedChunk,
        mask: &CanopyMask,
        alpha: f64,
    ) -> Result<String, StoreError> {
        let pixels = overlay_pixels(chunk, mask, alpha)?;
        let key = layout::overlay_key(&chunk.chunk_ref)?;
        let png = encode_png(&key, &pixels, chunk.size(), ExtendedColorType::Rgb8)?;
        self.put(&key, &png)?;
        Ok(key)
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<String, StoreError> {
        let key = layout::manifest_key(&manifest.file_name)?;
        let mut json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        json.push(b'\n');
        self.put(&key, &json)?;
        Ok(key)
    }

    /// Reads and validates a manifest; `Ok(None)` when none exists.
    pub fn read_manifest(&self, file_name: &str) -> Result<Option<Manifest>, StoreError> {
        let key = layout::manifest_key(file_name)?;
        let Some(bytes) = self.get(&key)? else {
            return Ok(None);
        };
        let corrupt = |reason: String| StoreError::CorruptManifest {
            key: key.clone(),
            reason,
        };
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        if manifest.file_name != file_name {
            return Err(corrupt(format!(
                "names file {:?}, stored under {file_name:?}",
                manifest.file_name
            )));
        }
        manifest.validate().map_err(corrupt)?;
        Ok(Some(manifest))
    }
}

/// out = (1 − alpha)·pixel + alpha·(0, 255, 0), rounded half-up, on mask pixels only.
pub fn overlay_pixels(
    chunk: &PaddedChunk,
    mask: &CanopyMask,
    alpha: f64,
) -> Result<Vec<u8>, StoreError> {
    if mask.chunk_ref != chunk.chunk_ref {
        return Err(StoreError::RefMismatch);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(StoreError::InvalidAlpha(alpha));
    }
    let blend =
        |v: u8, target: f64| ((1.0 - alpha) * v as f64 + alpha * target + 0.5).floor() as u8;
    let mut out = chunk.pixels().to_vec();
    for (px, &canopy) in out.chunks_exact_mut(3).zip(mask.bits()) {
        if canopy {
            px[0] = blend(px[0], 0.0);
            px[1] = blend(px[1], 255.0);
            px[2] = blend(px[2], 0.0);
        }
    }
    Ok(out)
}

fn encode_png(
    key: &str,
    pixels: &[u8],
    size: u32,
    color: ExtendedColorType,
) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Adaptive)
        .write_image(pixels, size, size, color)
        .map_err(|e| StoreError::Image {
            key: key.to_owned(),
            message: e.to_string(),
        })?;
    Ok(out)
}

fn decode_png(key: &str, bytes: &[u8]) -> Result<image::DynamicImage, StoreError> {
    image::load(Cursor::new(bytes), ImageFormat::Png).map_err(|e| StoreError::Image {
        key: key.to_owned(),
        message: e.to_string(),
    })
}

fn check_shape(key: &str, expected: u32, width: u32, height: u32) -> Result<(), StoreError> {
    if (width, height) != (expected, expected) {
        return Err(StoreError::ImageShape {
            key: key.to_owned(),
            expected,
            width,
            height,
        });
    }
    Ok(())
}
