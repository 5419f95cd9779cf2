//! Streaming reader for classic TIFF and BigTIFF containers.
//!
//! Opening a container walks the directory chain only; pixel data is read
//! per window by [`decode_window`], one segment at a time.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use thiserror::Error;

mod decode;
mod ifd;

pub use decode::{
    decode_window, decode_window_from, segments_overlapping, CountingSource, FileSource,
    SegmentSource,
};

use ifd::{tags, Cursor};

/// Band read when no override is given.
pub const DEFAULT_BAND: usize = 2;

#[derive(Debug, Error)]
pub enum TiffError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a TIFF file (bad magic number)")]
    BadMagic,
    #[error("file too short for a TIFF header")]
    TruncatedHeader,
    #[error("directory chain revisits offset {offset}")]
    CyclicDirectoryChain { offset: u64 },
    #[error("directory at offset {offset} is truncated or out of file")]
    TruncatedDirectory { offset: u64 },
    #[error("page {index} out of range (container has {page_count})")]
    PageOutOfRange { index: usize, page_count: usize },
    #[error("band {band} out of range (container has {page_count} pages)")]
    BandOutOfRange { band: usize, page_count: usize },
    #[error("required tag {0} missing")]
    MissingTag(u16),
    #[error("tag {tag}: {reason}")]
    InvalidTag { tag: u16, reason: &'static str },
    #[error("unsupported compression {0}")]
    UnsupportedCompression(u16),
    #[error("unsupported planar configuration {0}")]
    UnsupportedPlanarConfig(u16),
    #[error(
        "unsupported sample layout: {samples_per_pixel} samples, bits {bits:?}, format {format}"
    )]
    UnsupportedSampleFormat {
        samples_per_pixel: u16,
        bits: Vec<u16>,
        format: u16,
    },
    #[error("unsupported predictor {0}")]
    UnsupportedPredictor(u16),
    #[error("segment table has {offsets} offsets and {counts} byte counts, expected {expected}")]
    SegmentCountMismatch {
        expected: usize,
        offsets: usize,
        counts: usize,
    },
    #[error("window {width}x{height}+{x0}+{y0} outside page {page_width}x{page_height}")]
    WindowOutOfBounds {
        x0: u32,
        y0: u32,
        width: u32,
        height: u32,
        page_width: u32,
        page_height: u32,
    },
    #[error("segment {index} is corrupt: {reason}")]
    CorruptSegment { index: usize, reason: String },
    #[error("segment {index} ({offset}+{len}) lies beyond end of file ({file_len} bytes)")]
    SegmentOutOfFile {
        index: usize,
        offset: u64,
        len: u64,
        file_len: u64,
    },
}

impl TiffError {
    /// Stable variant name, printed by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            TiffError::Io(_) => "Io",
            TiffError::BadMagic => "BadMagic",
            TiffError::TruncatedHeader => "TruncatedHeader",
            TiffError::CyclicDirectoryChain { .. } => "CyclicDirectoryChain",
            TiffError::TruncatedDirectory { .. } => "TruncatedDirectory",
            TiffError::PageOutOfRange { .. } => "PageOutOfRange",
            TiffError::BandOutOfRange { .. } => "BandOutOfRange",
            TiffError::MissingTag(_) => "MissingTag",
            TiffError::InvalidTag { .. } => "InvalidTag",
            TiffError::UnsupportedCompression(_) => "UnsupportedCompression",
            TiffError::UnsupportedPlanarConfig(_) => "UnsupportedPlanarConfig",
            TiffError::UnsupportedSampleFormat { .. } => "UnsupportedSampleFormat",
            TiffError::UnsupportedPredictor(_) => "UnsupportedPredictor",
            TiffError::SegmentCountMismatch { .. } => "SegmentCountMismatch",
            TiffError::WindowOutOfBounds { .. } => "WindowOutOfBounds",
            TiffError::CorruptSegment { .. } => "CorruptSegment",
            TiffError::SegmentOutOfFile { .. } => "SegmentOutOfFile",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    pub(crate) fn u16(self, b: [u8; 2]) -> u16 {
        match self {
            ByteOrder::Little => u16::from_le_bytes(b),
            ByteOrder::Big => u16::from_be_bytes(b),
        }
    }

    pub(crate) fn u32(self, b: [u8; 4]) -> u32 {
        match self {
            ByteOrder::Little => u32::from_le_bytes(b),
            ByteOrder::Big => u32::from_be_bytes(b),
        }
    }

    pub(crate) fn u64(self, b: [u8; 8]) -> u64 {
        match self {
            ByteOrder::Little => u64::from_le_bytes(b),
            ByteOrder::Big => u64::from_be_bytes(b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Classic,
    BigTiff,
}

impl Variant {
    pub fn magic(self) -> u16 {
        match self {
            Variant::Classic => 42,
            Variant::BigTiff => 43,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Classic => "classic",
            Variant::BigTiff => "bigtiff",
        }
    }
}

/// An opened container: header plus the offsets of every page directory.
#[derive(Clone, Debug)]
pub struct ContainerInfo {
    pub path: PathBuf,
    pub byte_order: ByteOrder,
    pub variant: Variant,
    pub file_len: u64,
    ifd_offsets: Vec<u64>,
}

impl ContainerInfo {
    pub fn page_count(&self) -> usize {
        self.ifd_offsets.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compression {
    None,
    Lzw,
    Deflate,
}

impl Compression {
    fn from_tag(v: u16) -> Result<Self, TiffError> {
        match v {
            1 => Ok(Compression::None),
            5 => Ok(Compression::Lzw),
            8 | 32946 => Ok(Compression::Deflate),
            other => Err(TiffError::UnsupportedCompression(other)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Compression::None => "none",
            Compression::Lzw => "lzw",
            Compression::Deflate => "deflate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentLayout {
    Strips { rows_per_strip: u32 },
    Tiles { tile_width: u32, tile_height: u32 },
}

/// Ground meters per pixel from GeoTIFF ModelPixelScale.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelScale {
    pub sx: f64,
    pub sy: f64,
}

/// Everything needed to decode windows of one page.
#[derive(Clone, Debug)]
pub struct PageDescriptor {
    pub path: PathBuf,
    pub byte_order: ByteOrder,
    pub file_len: u64,
    pub index: usize,
    pub width: u32,
    pub height: u32,
    pub samples_per_pixel: u16,
    pub bits_per_sample: u16,
    pub compression: Compression,
    pub horizontal_predictor: bool,
    pub layout: SegmentLayout,
    pub segment_offsets: Vec<u64>,
    pub segment_byte_counts: Vec<u64>,
    pub geo_scale: Option<PixelScale>,
}

impl PageDescriptor {
    /// Segment count implied by the page geometry.
    pub fn expected_segment_count(&self) -> usize {
        expected_segments(self.width, self.height, self.layout)
    }

    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

fn expected_segments(width: u32, height: u32, layout: SegmentLayout) -> usize {
    match layout {
        SegmentLayout::Strips { rows_per_strip } => height.div_ceil(rows_per_strip) as usize,
        SegmentLayout::Tiles {
            tile_width,
            tile_height,
        } => width.div_ceil(tile_width) as usize * height.div_ceil(tile_height) as usize,
    }
}

/// A decoded rectangle of RGB pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterWindow {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

/// Validates the header and walks the directory chain without touching pixel data.
pub fn open_container(path: impl AsRef<Path>) -> Result<ContainerInfo, TiffError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut reader = BufReader::with_capacity(4096, file);
    let mut head = Vec::with_capacity(16);
    (&mut reader).take(16).read_to_end(&mut head)?;
    let header = ifd::parse_header(&head)?;

    let mut cur = Cursor::new(reader, header.order);
    let mut seen = HashSet::new();
    let mut ifd_offsets = Vec::new();
    let mut next = header.first_ifd;
    while next != 0 {
        if !seen.insert(next) {
            return Err(TiffError::CyclicDirectoryChain { offset: next });
        }
        let dir = ifd::read_directory(&mut cur, header.variant, next, file_len)?;
        ifd_offsets.push(next);
        next = dir.next;
    }
    if ifd_offsets.is_empty() {
        return Err(TiffError::TruncatedDirectory { offset: 0 });
    }
    Ok(ContainerInfo {
        path: path.to_path_buf(),
        byte_order: header.order,
        variant: header.variant,
        file_len,
        ifd_offsets,
    })
}

/// Resolves the decoding tags of page `index`.
pub fn read_page(container: &ContainerInfo, index: usize) -> Result<PageDescriptor, TiffError> {
    let Some(&offset) = container.ifd_offsets.get(index) else {
        return Err(TiffError::PageOutOfRange {
            index,
            page_count: container.page_count(),
        });
    };
    let file = File::open(&container.path)?;
    let mut cur = Cursor::new(BufReader::with_capacity(8192, file), container.byte_order);
    let variant = container.variant;
    let file_len = container.file_len;
    let dir = ifd::read_directory(&mut cur, variant, offset, file_len)?;

    let mut read = |tag: u16| -> Result<Option<Vec<u64>>, TiffError> {
        dir.read(&mut cur, variant, tag, file_len)?
            .map(|v| v.into_unsigned(tag))
            .transpose()
    };
    let first = |v: Option<Vec<u64>>, tag: u16| -> Result<Option<u64>, TiffError> {
        match v {
            None => Ok(None),
            Some(v) => v.first().copied().map(Some).ok_or(TiffError::InvalidTag {
                tag,
                reason: "empty value",
            }),
        }
    };
    let dim = |v: Option<u64>, tag: u16| -> Result<u32, TiffError> {
        let v = v.ok_or(TiffError::MissingTag(tag))?;
        if v == 0 || v > u32::MAX as u64 {
            return Err(TiffError::InvalidTag {
                tag,
                reason: "dimension out of range",
            });
        }
        Ok(v as u32)
    };

    let width = dim(
        first(read(tags::IMAGE_WIDTH)?, tags::IMAGE_WIDTH)?,
        tags::IMAGE_WIDTH,
    )?;
    let height = dim(
        first(read(tags::IMAGE_LENGTH)?, tags::IMAGE_LENGTH)?,
        tags::IMAGE_LENGTH,
    )?;

    let compression = Compression::from_tag(
        first(read(tags::COMPRESSION)?, tags::COMPRESSION)?.unwrap_or(1) as u16,
    )?;

    let samples_per_pixel =
        first(read(tags::SAMPLES_PER_PIXEL)?, tags::SAMPLES_PER_PIXEL)?.unwrap_or(1) as u16;
    let bits: Vec<u16> = read(tags::BITS_PER_SAMPLE)?
        .unwrap_or_else(|| vec![1])
        .into_iter()
        .map(|b| b as u16)
        .collect();
    let format = first(read(tags::SAMPLE_FORMAT)?, tags::SAMPLE_FORMAT)?.unwrap_or(1) as u16;
    let format_ok = read(tags::SAMPLE_FORMAT)?.is_none_or(|all| all.iter().all(|&f| f == 1));
    if samples_per_pixel < 3 || bits.iter().any(|&b| b != 8) || !format_ok {
        return Err(TiffError::UnsupportedSampleFormat {
            samples_per_pixel,
            bits,
            format,
        });
    }

    let planar = first(
        read(tags::PLANAR_CONFIGURATION)?,
        tags::PLANAR_CONFIGURATION,
    )?
    .unwrap_or(1) as u16;
    if planar != 1 {
        return Err(TiffError::UnsupportedPlanarConfig(planar));
    }

    let horizontal_predictor = match first(read(tags::PREDICTOR)?, tags::PREDICTOR)?.unwrap_or(1) {
        1 => false,
        2 => true,
        other => return Err(TiffError::UnsupportedPredictor(other as u16)),
    };

    let tiled = dir.has(tags::TILE_WIDTH) || dir.has(tags::TILE_OFFSETS);
    let (layout, offsets_tag, counts_tag) = if tiled {
        let tile_width = dim(
            first(read(tags::TILE_WIDTH)?, tags::TILE_WIDTH)?,
            tags::TILE_WIDTH,
        )?;
        let tile_height = dim(
            first(read(tags::TILE_LENGTH)?, tags::TILE_LENGTH)?,
            tags::TILE_LENGTH,
        )?;
        (
            SegmentLayout::Tiles {
                tile_width,
                tile_height,
            },
            tags::TILE_OFFSETS,
            tags::TILE_BYTE_COUNTS,
        )
    } else {
        // Absent RowsPerStrip means a single strip.
        let rows = first(read(tags::ROWS_PER_STRIP)?, tags::ROWS_PER_STRIP)?
            .unwrap_or(u32::MAX as u64)
            .clamp(1, height as u64) as u32;
        (
            SegmentLayout::Strips {
                rows_per_strip: rows,
            },
            tags::STRIP_OFFSETS,
            tags::STRIP_BYTE_COUNTS,
        )
    };
    let segment_offsets = read(offsets_tag)?.ok_or(TiffError::MissingTag(offsets_tag))?;
    let segment_byte_counts = read(counts_tag)?.ok_or(TiffError::MissingTag(counts_tag))?;
    let expected = expected_segments(width, height, layout);
    if segment_offsets.len() != expected || segment_byte_counts.len() != expected {
        return Err(TiffError::SegmentCountMismatch {
            expected,
            offsets: segment_offsets.len(),
            counts: segment_byte_counts.len(),
        });
    }

    let geo_scale = match dir.read(&mut cur, variant, tags::MODEL_PIXEL_SCALE, file_len)? {
        None => None,
        Some(v) => {
            let v = v.into_float();
            match v.as_slice() {
                [sx, sy, ..] if *sx > 0.0 && *sy > 0.0 => Some(PixelScale { sx: *sx, sy: *sy }),
                _ => {
                    log::warn!(
                        "{}: page {index}: ignoring non-positive ModelPixelScale {v:?}",
                        container.path.display()
                    );
                    None
                }
            }
        }
    };

    Ok(PageDescriptor {
        path: container.path.clone(),
        byte_order: container.byte_order,
        file_len,
        index,
        width,
        height,
        samples_per_pixel,
        bits_per_sample: 8,
        compression,
        horizontal_predictor,
        layout,
        segment_offsets,
        segment_byte_counts,
        geo_scale,
    })
}

/// Reads the page treated as the analysis band.
pub fn select_band(container: &ContainerInfo, band: usize) -> Result<PageDescriptor, TiffError> {
    if band >= container.page_count() {
        return Err(TiffError::BandOutOfRange {
            band,
            page_count: container.page_count(),
        });
    }
    read_page(container, band)
}
