//! Canopy estimators: Excess Green thresholding, imported model masks, and
//! rasterized detection boxes. Every backend yields a [`CanopyMask`].

use std::fmt;

use thiserror::Error;

use crate::store::{ObjectStore, Store, StoreError};
use crate::tiling::{is_covered, ChunkRef, PaddedChunk};

pub const DEFAULT_TAU: i32 = 40;
/// ExG ranges over [-510, 510] for 8-bit channels.
pub const TAU_RANGE: std::ops::RangeInclusive<i32> = -510..=510;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("no mask stored for {file} r{row} c{col}")]
    MaskMissing { file: String, row: u32, col: u32 },
    #[error("mask is {width}x{height}, chunk size is {chunk_size}")]
    MaskShapeMismatch {
        width: u32,
        height: u32,
        chunk_size: u32,
    },
    #[error("detection line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("threshold {0} outside [-510, 510]")]
    TauOutOfRange(i32),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Per-pixel canopy labels over a full `chunk_size`² chunk, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CanopyMask {
    pub chunk_ref: ChunkRef,
    bits: Vec<bool>,
}

impl CanopyMask {
    pub fn empty(chunk_ref: ChunkRef) -> Self {
        let n = chunk_ref.chunk_size as usize * chunk_ref.chunk_size as usize;
        CanopyMask {
            chunk_ref,
            bits: vec![false; n],
        }
    }

    pub fn from_bits(chunk_ref: ChunkRef, bits: Vec<bool>) -> Self {
        let n = chunk_ref.chunk_size as usize * chunk_ref.chunk_size as usize;
        assert_eq!(bits.len(), n, "mask must cover chunk_size² pixels");
        CanopyMask { chunk_ref, bits }
    }

    pub fn size(&self) -> u32 {
        self.chunk_ref.chunk_size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.size() as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let size = self.size() as usize;
        self.bits[y as usize * size + x as usize] = value;
    }

    /// Marked pixels anywhere in the mask, padding included.
    pub fn marked(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }
}

/// Which estimator produces canopy masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EstimatorKind {
    Threshold { tau: i32 },
    MaskImport,
    BoxImport,
}

impl EstimatorKind {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        match *self {
            EstimatorKind::Threshold { tau } if !TAU_RANGE.contains(&tau) => {
                Err(SegmentationError::TauOutOfRange(tau))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Threshold { tau } => write!(f, "threshold(tau={tau})"),
            EstimatorKind::MaskImport => f.write_str("mask"),
            EstimatorKind::BoxImport => f.write_str("boxes"),
        }
    }
}

/// Excess Green index, 2G − R − B.
#[inline]
pub fn excess_green(rgb: &[u8]) -> i32 {
    2 * rgb[1] as i32 - rgb[0] as i32 - rgb[2] as i32
}

/// Marks in-bounds covered pixels whose ExG exceeds `tau`.
pub fn segment_threshold(chunk: &PaddedChunk, tau: i32) -> CanopyMask {
    let r = &chunk.chunk_ref;
    let size = r.chunk_size as usize;
    let mut bits = vec![false; size * size];
    for y in 0..r.in_height as usize {
        let row = &chunk.pixels()[y * size * 3..(y * size + r.in_width as usize) * 3];
        for (x, px) in row.chunks_exact(3).enumerate() {
            bits[y * size + x] = is_covered(px) && excess_green(px) > tau;
        }
    }
    CanopyMask::from_bits(r.clone(), bits)
}

/// Loads the stored mask for `chunk_ref`; nonzero pixels are canopy.
pub fn import_mask<B: ObjectStore>(
    store: &Store<B>,
    chunk_ref: &ChunkRef,
) -> Result<CanopyMask, SegmentationError> {
    let Some((width, height, luma)) = store.read_mask_image(chunk_ref)? else {
        return Err(SegmentationError::MaskMissing {
            file: chunk_ref.file_name.clone(),
            row: chunk_ref.row,
            col: chunk_ref.col,
        });
    };
    if (width, height) != (chunk_ref.chunk_size, chunk_ref.chunk_size) {
        return Err(SegmentationError::MaskShapeMismatch {
            width,
            height,
            chunk_size: chunk_ref.chunk_size,
        });
    }
    Ok(CanopyMask::from_bits(
        chunk_ref.clone(),
        luma.into_iter().map(|v| v != 0).collect(),
    ))
}

/// A detector box in normalized center/size form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionBox {
    pub class_id: i64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: Option<f64>,
}

/// Parses `classId cx cy w h [confidence]` lines. Blank lines are ignored;
/// coordinates are clamped to [0, 1].
pub fn parse_detections(text: &str) -> Result<Vec<DetectionBox>, SegmentationError> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = |reason: String| SegmentationError::MalformedLine {
            line: line_no,
            reason,
        };
        if !(5..=6).contains(&fields.len()) {
            return Err(malformed(format!(
                "expected 5 or 6 fields, found {}",
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64, SegmentationError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(format!("{s:?} is not a finite number")))
        };
        let class_id = fields[0]
            .parse::<i64>()
            .map_err(|_| malformed(format!("class id {:?} is not an integer", fields[0])))?;
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        let (cx, cy) = (clamp(num(fields[1])?), clamp(num(fields[2])?));
        let (w, h) = (clamp(num(fields[3])?), clamp(num(fields[4])?));
        if w <= 0.0 || h <= 0.0 {
            return Err(malformed("box has zero or negative size".into()));
        }
        let confidence = fields.get(5).map(|s| num(s).map(clamp)).transpose()?;
        boxes.push(DetectionBox {
            class_id,
            cx,
            cy,
            w,
            h,
            confidence,
        });
    }
    Ok(boxes)
}

/// Keeps boxes at or above `floor`; boxes without a confidence are kept.
pub fn filter_by_confidence(boxes: Vec<DetectionBox>, floor: Option<f64>) -> Vec<DetectionBox> {
    match floor {
        None => boxes,
        Some(floor) => boxes
            .into_iter()
            .filter(|b| b.confidence.is_none_or(|c| c >= floor))
            .collect(),
    }
}

/// Pixel span [start, end) of a normalized interval on a `size`-pixel axis.
pub fn box_span(center: f64, extent: f64, size: u32) -> (u32, u32) {
    let s = size as f64;
    let to_px = |v: f64| (s * v).round().clamp(0.0, s) as u32;
    (to_px(center - extent / 2.0), to_px(center + extent / 2.0))
}

/// Union of the boxes' pixel rectangles.
pub fn rasterize_boxes(boxes: &[DetectionBox], chunk_ref: &ChunkRef) -> CanopyMask {
    let size = chunk_ref.chunk_size;
    let mut mask = CanopyMask::empty(chunk_ref.clone());
    for b in boxes {
        let (left, right) = box_span(b.cx, b.w, size);
        let (top, bottom) = box_span(b.cy, b.h, size);
        for y in top..bottom {
            let row = y as usize * size as usize;
            mask.bits[row + left as usize..row + right as usize].fill(true);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::plan_grid;

    fn chunk_with(pixels: &[[u8; 3]], size: u32, in_w: u32, in_h: u32) -> PaddedChunk {
        let grid = plan_grid(in_w, in_h, size).unwrap();
        let r = grid.chunk("f", 0, 0).unwrap();
        let mut buf = vec![0u8; (size * size * 3) as usize];
        for (i, px) in pixels.iter().enumerate() {
            let (x, y) = (i as u32 % in_w, i as u32 / in_w);
            let at = ((y * size + x) * 3) as usize;
            buf[at..at + 3].copy_from_slice(px);
        }
        PaddedChunk::from_pixels(r, buf)
    }

    #[test]
    fn exg_values() {
        assert_eq!(excess_green(&[0, 255, 0]), 510);
        assert_eq!(excess_green(&[100, 100, 100]), 0);
        assert_eq!(excess_green(&[255, 0, 255]), -510);
    }

    #[test]
    fn threshold_examples() {
        let c = chunk_with(&[[0, 255, 0], [100, 100, 100], [0, 0, 0]], 4, 3, 1);
        let m = segment_threshold(&c, 40);
        assert!(m.get(0, 0));
        assert!(!m.get(1, 0));
        assert!(!m.get(2, 0));
        // Padding and black pixels stay unmarked even when every ExG passes.
        let m = segment_threshold(&c, -510 - 1);
        assert!(m.get(0, 0) && m.get(1, 0));
        assert!(!m.get(2, 0));
        assert!(!m.get(3, 0));
        assert!(!m.get(0, 1));
    }

    #[test]
    fn tau_validation() {
        assert!(EstimatorKind::Threshold { tau: 510 }.validate().is_ok());
        assert!(EstimatorKind::Threshold { tau: -510 }.validate().is_ok());
        assert!(matches!(
            EstimatorKind::Threshold { tau: 511 }.validate(),
            Err(SegmentationError::TauOutOfRange(511))
        ));
    }

    #[test]
    fn parse_examples() {
        let b = parse_detections("0 0.5 0.5 0.5 0.5").unwrap();
        assert_eq!(
            b,
            vec![DetectionBox {
                class_id: 0,
                cx: 0.5,
                cy: 0.5,
                w: 0.5,
                h: 0.5,
                confidence: None
            }]
        );
        assert!(parse_detections("").unwrap().is_empty());
        assert!(parse_detections("\n  \n").unwrap().is_empty());
        assert!(matches!(
            parse_detections("0 0.5 0.5"),
            Err(SegmentationError::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_detections("0 0.1 0.1 0.1 0.1\n0 a 0.5 0.5 0.5\n"),
            Err(SegmentationError::MalformedLine { line: 2, .. })
        ));
        assert!(matches!(
            parse_detections("0 0.5 0.5 0.5 0.5 0.9 7"),
            Err(SegmentationError::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_detections("0 0.5 0.5 0 0.5"),
            Err(SegmentationError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn parse_clamps_and_reads_confidence() {
        let b = parse_detections("3 1.2 -0.1 2 0.25 0.87\r\n").unwrap();
        assert_eq!((b[0].cx, b[0].cy, b[0].w, b[0].h), (1.0, 0.0, 1.0, 0.25));
        assert_eq!(b[0].confidence, Some(0.87));
        assert_eq!(b[0].class_id, 3);
    }

    #[test]
    fn confidence_floor() {
        let b = parse_detections("0 .5 .5 .1 .1 0.2\n0 .5 .5 .1 .1 0.8\n0 .5 .5 .1 .1").unwrap();
        assert_eq!(filter_by_confidence(b.clone(), None).len(), 3);
        assert_eq!(filter_by_confidence(b, Some(0.5)).len(), 2);
    }

    #[test]
    fn centered_box_rasterizes_to_quarter() {
        let r = plan_grid(640, 640, 640).unwrap().chunk("f", 0, 0).unwrap();
        let b = parse_detections("0 0.5 0.5 0.5 0.5").unwrap();
        let m = rasterize_boxes(&b, &r);
        assert_eq!(m.marked(), 102_400);
        assert!(m.get(160, 160) && m.get(479, 479));
        assert!(!m.get(159, 160) && !m.get(480, 479));
        let twice = [b[0], b[0]];
        assert_eq!(rasterize_boxes(&twice, &r).marked(), 102_400);
    }

    #[test]
    fn full_box_covers_chunk() {
        let r = plan_grid(640, 640, 640).unwrap().chunk("f", 0, 0).unwrap();
        let b = parse_detections("0 0.5 0.5 1 1").unwrap();
        assert_eq!(rasterize_boxes(&b, &r).marked(), 640 * 640);
    }

    #[test]
    fn box_edges_round_half_away_from_zero() {
        // 0.5 px lands exactly on a half: 10·0.05 = 0.5 → 1.
        assert_eq!(box_span(0.1, 0.1, 10), (1, 2));
        assert_eq!(box_span(0.0, 0.5, 10), (0, 3));
        assert_eq!(box_span(1.0, 0.5, 10), (8, 10));
    }
}
