use std::fs::File;
use std::io::Read;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use flate2::read::ZlibDecoder;

use super::{Compression, PageDescriptor, RasterWindow, SegmentLayout, TiffError};

/// Positional byte access to a container's segment data.
pub trait SegmentSource: Sync {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<()>;
}

/// Reentrant file-backed source using positional reads.
pub struct FileSource {
    file: File,
}

impl FileSource {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        Ok(FileSource {
            file: File::open(path)?,
        })
    }
}

#[cfg(unix)]
impl SegmentSource for FileSource {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<()> {
        std::os::unix::fs::FileExt::read_exact_at(&self.file, buf, offset)
    }
}

#[cfg(not(unix))]
impl SegmentSource for FileSource {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<()> {
        use std::io::{Seek, SeekFrom};
        let mut f = self.file.try_clone()?;
        f.seek(SeekFrom::Start(offset))?;
        f.read_exact(buf)
    }
}

/// Wraps a source and counts the segment reads that pass through it.
pub struct CountingSource<S> {
    inner: S,
    reads: AtomicU64,
    bytes: AtomicU64,
    peak_segment: AtomicU64,
}

impl<S: SegmentSource> CountingSource<S> {
    pub fn new(inner: S) -> Self {
        CountingSource {
            inner,
            reads: AtomicU64::new(0),
            bytes: AtomicU64::new(0),
            peak_segment: AtomicU64::new(0),
        }
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes.load(Ordering::Relaxed)
    }

    /// Largest single read, in bytes.
    pub fn peak_segment_bytes(&self) -> u64 {
        self.peak_segment.load(Ordering::Relaxed)
    }
}

impl<S: SegmentSource> SegmentSource for CountingSource<S> {
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<()> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.bytes.fetch_add(buf.len() as u64, Ordering::Relaxed);
        self.peak_segment
            .fetch_max(buf.len() as u64, Ordering::Relaxed);
        self.inner.read_at(offset, buf)
    }
}

/// Segment indices intersecting the window, in storage order.
pub fn segments_overlapping(
    page: &PageDescriptor,
    x0: u32,
    y0: u32,
    width: u32,
    height: u32,
) -> Vec<usize> {
    if width == 0 || height == 0 {
        return Vec::new();
    }
    let (x1, y1) = (x0 + width - 1, y0 + height - 1);
    match page.layout {
        SegmentLayout::Strips { rows_per_strip } => {
            ((y0 / rows_per_strip) as usize..=(y1 / rows_per_strip) as usize).collect()
        }
        SegmentLayout::Tiles {
            tile_width,
            tile_height,
        } => {
            let across = page.width.div_ceil(tile_width) as usize;
            let cols = (x0 / tile_width) as usize..=(x1 / tile_width) as usize;
            ((y0 / tile_height) as usize..=(y1 / tile_height) as usize)
                .flat_map(|ty| cols.clone().map(move |tx| ty * across + tx))
                .collect()
        }
    }
}

/// Decodes a window by opening the page's file for positional reads.
pub fn decode_window(
    page: &PageDescriptor,
    x0: u32,
    y0: u32,
    width: u32,
    height: u32,
) -> Result<RasterWindow, TiffError> {
    let source = FileSource::open(&page.path)?;
    decode_window_from(page, &source, x0, y0, width, height)
}

/// Decodes a window reading only the segments that intersect it, one at a time.
pub fn decode_window_from(
    page: &PageDescriptor,
    source: &dyn SegmentSource,
    x0: u32,
    y0: u32,
    width: u32,
    height: u32,
) -> Result<RasterWindow, TiffError> {
    let in_bounds = width > 0
        && height > 0
        && x0.checked_add(width).is_some_and(|e| e <= page.width)
        && y0.checked_add(height).is_some_and(|e| e <= page.height);
    if !in_bounds {
        return Err(TiffError::WindowOutOfBounds {
            x0,
            y0,
            width,
            height,
            page_width: page.width,
            page_height: page.height,
        });
    }

    let spp = page.samples_per_pixel as usize;
    let out_stride = width as usize * 3;
    let mut pixels = vec![0u8; out_stride * height as usize];
    let mut compressed = Vec::new();
    let mut raw = Vec::new();

    for index in segments_overlapping(page, x0, y0, width, height) {
        let seg = segment_rect(page, index);
        read_segment(page, source, index, &mut compressed)?;
        decompress(
            page,
            index,
            &compressed,
            seg.width as usize * seg.rows as usize * spp,
            &mut raw,
        )?;
        if page.horizontal_predictor {
            undo_horizontal_predictor(&mut raw, seg.width as usize * spp, spp);
        }

        // Intersection of the segment with the window, in page coordinates.
        let xs = overlap(seg.x0..seg.x0 + seg.width, x0..x0 + width);
        let ys = overlap(seg.y0..seg.y0 + seg.rows, y0..y0 + height);
        for y in ys {
            let src_row = (y - seg.y0) as usize * seg.width as usize * spp;
            let dst_row = (y - y0) as usize * out_stride;
            for x in xs.clone() {
                let s = src_row + (x - seg.x0) as usize * spp;
                let d = dst_row + (x - x0) as usize * 3;
                pixels[d..d + 3].copy_from_slice(&raw[s..s + 3]);
            }
        }
    }

    Ok(RasterWindow {
        x0,
        y0,
        width,
        height,
        pixels,
    })
}

/// Geometry of a stored segment; tiles always span full tile size.
struct SegmentRect {
    x0: u32,
    y0: u32,
    width: u32,
    rows: u32,
}

fn segment_rect(page: &PageDescriptor, index: usize) -> SegmentRect {
    match page.layout {
        SegmentLayout::Strips { rows_per_strip } => {
            let y0 = index as u32 * rows_per_strip;
            SegmentRect {
                x0: 0,
                y0,
                width: page.width,
                rows: rows_per_strip.min(page.height - y0),
            }
        }
        SegmentLayout::Tiles {
            tile_width,
            tile_height,
        } => {
            let across = page.width.div_ceil(tile_width) as usize;
            SegmentRect {
                x0: (index % across) as u32 * tile_width,
                y0: (index / across) as u32 * tile_height,
                width: tile_width,
                rows: tile_height,
            }
        }
    }
}

fn overlap(a: Range<u32>, b: Range<u32>) -> Range<u32> {
    a.start.max(b.start)..a.end.min(b.end)
}

fn read_segment(
    page: &PageDescriptor,
    source: &dyn SegmentSource,
    index: usize,
    buf: &mut Vec<u8>,
) -> Result<(), TiffError> {
    let offset = page.segment_offsets[index];
    let len = page.segment_byte_counts[index];
    if offset
        .checked_add(len)
        .is_none_or(|end| end > page.file_len)
    {
        return Err(TiffError::SegmentOutOfFile {
            index,
            offset,
            len,
            file_len: page.file_len,
        });
    }
    buf.clear();
    buf.resize(len as usize, 0);
    source.read_at(offset, buf)?;
    Ok(())
}

fn decompress(
    page: &PageDescriptor,
    index: usize,
    input: &[u8],
    expected: usize,
    out: &mut Vec<u8>,
) -> Result<(), TiffError> {
    let corrupt = |reason: String| TiffError::CorruptSegment { index, reason };
    out.clear();
    match page.compression {
        Compression::None => out.extend_from_slice(input),
        Compression::Deflate => {
            out.reserve(expected);
            ZlibDecoder::new(input)
                .take(expected as u64)
                .read_to_end(out)
                .map_err(|e| corrupt(format!("deflate: {e}")))?;
        }
        Compression::Lzw => {
            out.reserve(expected);
            let mut decoder =
                weezl::decode::Decoder::with_tiff_size_switch(weezl::BitOrder::Msb, 8);
            let result = decoder.into_vec(out).decode(input);
            // Some writers omit the end-of-information code; a short stream is
            // still caught by the length check below.
            match result.status {
                Ok(_) => {}
                Err(e) => return Err(corrupt(format!("lzw: {e}"))),
            }
            out.truncate(expected);
        }
    }
    if out.len() < expected {
        return Err(corrupt(format!(
            "decoded {} bytes, expected {expected}",
            out.len()
        )));
    }
    out.truncate(expected);
    Ok(())
}

fn undo_horizontal_predictor(buf: &mut [u8], row_bytes: usize, spp: usize) {
    for row in buf.chunks_mut(row_bytes) {
        for i in spp..row.len() {
            row[i] = row[i].wrapping_add(row[i - spp]);
        }
    }
}
