//! Chunk grid planning, zero-padded chunk extraction, and pixel accounting.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use thiserror::Error;

use crate::tiff_reader::{self, PageDescriptor, RasterWindow, SegmentSource, TiffError};

pub const DEFAULT_CHUNK_SIZE: u32 = 640;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TilingError {
    #[error(
        "page and chunk dimensions must be at least 1 (got {width}x{height}, chunk {chunk_size})"
    )]
    ZeroDimension {
        width: u32,
        height: u32,
        chunk_size: u32,
    },
    #[error("chunk ({row}, {col}) outside a {rows}x{cols} grid")]
    OutOfGrid {
        row: u32,
        col: u32,
        rows: u32,
        cols: u32,
    },
}

/// Square tiling of a page, enumerated row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkGrid {
    pub page_width: u32,
    pub page_height: u32,
    pub chunk_size: u32,
    pub rows: u32,
    pub cols: u32,
}

pub fn plan_grid(
    page_width: u32,
    page_height: u32,
    chunk_size: u32,
) -> Result<ChunkGrid, TilingError> {
    if page_width == 0 || page_height == 0 || chunk_size == 0 {
        return Err(TilingError::ZeroDimension {
            width: page_width,
            height: page_height,
            chunk_size,
        });
    }
    Ok(ChunkGrid {
        page_width,
        page_height,
        chunk_size,
        rows: page_height.div_ceil(chunk_size),
        cols: page_width.div_ceil(chunk_size),
    })
}

impl ChunkGrid {
    pub fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn chunk(&self, file_name: &str, row: u32, col: u32) -> Result<ChunkRef, TilingError> {
        if row >= self.rows || col >= self.cols {
            return Err(TilingError::OutOfGrid {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        let x0 = col * self.chunk_size;
        let y0 = row * self.chunk_size;
        Ok(ChunkRef {
            file_name: file_name.to_owned(),
            row,
            col,
            x0,
            y0,
            in_width: self.chunk_size.min(self.page_width - x0),
            in_height: self.chunk_size.min(self.page_height - y0),
            chunk_size: self.chunk_size,
        })
    }

    /// All chunk references, row-major.
    pub fn refs<'a>(&'a self, file_name: &'a str) -> impl Iterator<Item = ChunkRef> + 'a {
        (0..self.rows).flat_map(move |row| {
            (0..self.cols).map(move |col| self.chunk(file_name, row, col).expect("in grid"))
        })
    }
}

/// One grid cell: its position and the part of it that lies on the page.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChunkRef {
    pub file_name: String,
    pub row: u32,
    pub col: u32,
    pub x0: u32,
    pub y0: u32,
    pub in_width: u32,
    pub in_height: u32,
    pub chunk_size: u32,
}

impl ChunkRef {
    pub fn in_bounds(&self, x: u32, y: u32) -> bool {
        x < self.in_width && y < self.in_height
    }

    pub fn in_bounds_pixels(&self) -> u64 {
        self.in_width as u64 * self.in_height as u64
    }
}

/// A `chunk_size`² RGB block; pixels outside the in-bounds extent are (0,0,0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedChunk {
    pub chunk_ref: ChunkRef,
    pixels: Vec<u8>,
}

impl PaddedChunk {
    /// Places a decoded window at the chunk origin and zero-pads the rest.
    pub fn from_window(chunk_ref: ChunkRef, window: &RasterWindow) -> Self {
        assert_eq!(
            (window.width, window.height),
            (chunk_ref.in_width, chunk_ref.in_height),
            "window does not match the chunk's in-bounds extent"
        );
        let size = chunk_ref.chunk_size as usize;
        let mut pixels = vec![0u8; size * size * 3];
        let src_stride = window.width as usize * 3;
        for (y, row) in window.pixels.chunks_exact(src_stride).enumerate() {
            pixels[y * size * 3..y * size * 3 + src_stride].copy_from_slice(row);
        }
        PaddedChunk { chunk_ref, pixels }
    }

    /// Wraps an existing `chunk_size`² RGB buffer, e.g. one read back from the store.
    /// Padding is not re-zeroed; accounting ignores it regardless.
    pub fn from_pixels(chunk_ref: ChunkRef, pixels: Vec<u8>) -> Self {
        let size = chunk_ref.chunk_size as usize;
        assert_eq!(
            pixels.len(),
            size * size * 3,
            "buffer is not chunk_size² RGB"
        );
        PaddedChunk { chunk_ref, pixels }
    }

    pub fn size(&self) -> u32 {
        self.chunk_ref.chunk_size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.size() as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Rows of the in-bounds region, each `in_width` pixels long.
    pub(crate) fn in_bounds_rows(&self) -> impl Iterator<Item = &[u8]> {
        let stride = self.size() as usize * 3;
        let width = self.chunk_ref.in_width as usize * 3;
        self.pixels
            .chunks_exact(stride)
            .take(self.chunk_ref.in_height as usize)
            .map(move |row| &row[..width])
    }
}

#[inline]
pub fn is_covered(rgb: &[u8]) -> bool {
    rgb[0] != 0 || rgb[1] != 0 || rgb[2] != 0
}

/// Decodes the in-bounds extent of `chunk_ref` and pads it.
pub fn extract_chunk(page: &PageDescriptor, chunk_ref: ChunkRef) -> Result<PaddedChunk, TiffError> {
    let source = tiff_reader::FileSource::open(&page.path)?;
    extract_chunk_from(page, &source, chunk_ref)
}

pub fn extract_chunk_from(
    page: &PageDescriptor,
    source: &dyn SegmentSource,
    chunk_ref: ChunkRef,
) -> Result<PaddedChunk, TiffError> {
    let window = tiff_reader::decode_window_from(
        page,
        source,
        chunk_ref.x0,
        chunk_ref.y0,
        chunk_ref.in_width,
        chunk_ref.in_height,
    )?;
    Ok(PaddedChunk::from_window(chunk_ref, &window))
}

/// In-bounds pixel tallies. Padding never contributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelAccount {
    pub total_pixels: u64,
    pub covered_pixels: u64,
}

impl Add for PixelAccount {
    type Output = PixelAccount;

    fn add(self, rhs: Self) -> Self {
        PixelAccount {
            total_pixels: self.total_pixels + rhs.total_pixels,
            covered_pixels: self.covered_pixels + rhs.covered_pixels,
        }
    }
}

impl AddAssign for PixelAccount {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl Sum for PixelAccount {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(PixelAccount::default(), Add::add)
    }
}

pub fn account_chunk(chunk: &PaddedChunk) -> PixelAccount {
    let covered = chunk
        .in_bounds_rows()
        .map(|row| row.chunks_exact(3).filter(|px| is_covered(px)).count() as u64)
        .sum();
    PixelAccount {
        total_pixels: chunk.chunk_ref.in_bounds_pixels(),
        covered_pixels: covered,
    }
}

/// True when the chunk has no covered pixel and can bypass estimation.
pub fn is_skippable(chunk: &PaddedChunk) -> bool {
    !chunk
        .in_bounds_rows()
        .any(|row| row.chunks_exact(3).any(is_covered))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk_of(grid: &ChunkGrid, row: u32, col: u32, rgb: [u8; 3]) -> PaddedChunk {
        let r = grid.chunk("f", row, col).unwrap();
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(r.in_bounds_pixels() as usize * 3)
            .collect();
        let window = RasterWindow {
            x0: r.x0,
            y0: r.y0,
            width: r.in_width,
            height: r.in_height,
            pixels,
        };
        PaddedChunk::from_window(r, &window)
    }

    #[test]
    fn grid_shapes() {
        let g = plan_grid(640, 640, 640).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (1, 1, 1));
        let g = plan_grid(1300, 700, 640).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (2, 3, 6));
        let g = plan_grid(1, 1, 640).unwrap();
        let r = g.chunk("f", 0, 0).unwrap();
        assert_eq!((r.in_width, r.in_height), (1, 1));
    }

    #[test]
    fn zero_dimension() {
        assert!(matches!(
            plan_grid(0, 5, 640),
            Err(TilingError::ZeroDimension { .. })
        ));
        assert!(matches!(
            plan_grid(5, 0, 640),
            Err(TilingError::ZeroDimension { .. })
        ));
        assert!(matches!(
            plan_grid(5, 5, 0),
            Err(TilingError::ZeroDimension { .. })
        ));
    }

    #[test]
    fn margin_extents_and_order() {
        let g = plan_grid(1300, 700, 640).unwrap();
        let refs: Vec<_> = g.refs("f").collect();
        let coords: Vec<_> = refs.iter().map(|r| (r.row, r.col)).collect();
        assert_eq!(coords, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        assert_eq!((refs[2].in_width, refs[2].in_height), (20, 640));
        assert_eq!((refs[5].x0, refs[5].y0), (1280, 640));
        assert_eq!((refs[5].in_width, refs[5].in_height), (20, 60));
        assert!(g.chunk("f", 2, 0).is_err());
    }

    #[test]
    fn interior_chunk_has_no_padding() {
        let g = plan_grid(1280, 1280, 640).unwrap();
        let c = chunk_of(&g, 1, 1, [10, 20, 30]);
        assert!(c.pixels().chunks_exact(3).all(|p| p == [10, 20, 30]));
        assert_eq!(c.pixels().len(), 640 * 640 * 3);
    }

    #[test]
    fn margin_chunk_is_zero_padded() {
        let g = plan_grid(740, 640, 640).unwrap();
        let c = chunk_of(&g, 0, 1, [10, 20, 30]);
        assert_eq!(c.chunk_ref.in_width, 100);
        for y in 0..640 {
            for x in 0..640 {
                let expected = if x < 100 { [10, 20, 30] } else { [0, 0, 0] };
                assert_eq!(c.pixel(x, y), expected);
            }
        }
        assert_eq!(
            account_chunk(&c),
            PixelAccount {
                total_pixels: 64000,
                covered_pixels: 64000
            }
        );
    }

    #[test]
    fn single_pixel_page() {
        let g = plan_grid(1, 1, 640).unwrap();
        let c = chunk_of(&g, 0, 0, [1, 0, 0]);
        let zeros = c
            .pixels()
            .chunks_exact(3)
            .filter(|p| *p == [0, 0, 0])
            .count();
        assert_eq!(c.pixel(0, 0), [1, 0, 0]);
        assert_eq!(zeros, 409_599);
    }

    #[test]
    fn empty_chunk_accounting() {
        let g = plan_grid(640, 640, 640).unwrap();
        let c = chunk_of(&g, 0, 0, [0, 0, 0]);
        assert_eq!(
            account_chunk(&c),
            PixelAccount {
                total_pixels: 409_600,
                covered_pixels: 0
            }
        );
        assert!(is_skippable(&c));

        let mut pixels = c.into_pixels();
        pixels[3 * 1234 + 1] = 1;
        let c = PaddedChunk::from_pixels(g.chunk("f", 0, 0).unwrap(), pixels);
        assert!(!is_skippable(&c));
        assert_eq!(account_chunk(&c).covered_pixels, 1);
    }

    #[test]
    fn any_channel_counts_as_covered() {
        assert!(!is_covered(&[0, 0, 0]));
        assert!(is_covered(&[0, 0, 1]));
        assert!(is_covered(&[0, 1, 0]));
        assert!(is_covered(&[1, 0, 0]));
    }

    #[test]
    fn padding_is_never_counted() {
        let g = plan_grid(50, 30, 64).unwrap();
        let c = chunk_of(&g, 0, 0, [0, 0, 0]);
        let before = account_chunk(&c);
        let mut pixels = c.pixels().to_vec();
        for y in 0..64 {
            for x in 0..64 {
                if x >= 50 || y >= 30 {
                    let i = (y * 64 + x) * 3;
                    pixels[i..i + 3].copy_from_slice(&[255, 255, 255]);
                }
            }
        }
        let dirty = PaddedChunk::from_pixels(c.chunk_ref.clone(), pixels);
        assert_eq!(account_chunk(&dirty), before);
        assert!(is_skippable(&dirty));
    }

    #[test]
    fn accounts_sum() {
        let a = PixelAccount {
            total_pixels: 10,
            covered_pixels: 3,
        };
        let total: PixelAccount = [a, a, a].into_iter().sum();
        assert_eq!(total.total_pixels, 30);
        assert_eq!(total.covered_pixels, 9);
    }
}
