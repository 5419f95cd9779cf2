//! Test-only TIFF/BigTIFF writer.
//!
//! Written from the container byte layouts directly and shares no code with
//! the reader in the `canopy` crate, so round-trip tests compare two
//! independent implementations. Includes its own TIFF-flavoured LZW encoder.

use std::fs;
use std::io::Write;
use std::path::Path;

use flate2::write::ZlibEncoder;
use rand::Rng;

pub mod lzw;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Classic,
    BigTiff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compression {
    None,
    Lzw,
    Deflate,
    /// Deflate written with the legacy Adobe tag value 32946.
    DeflateLegacy,
}

impl Compression {
    fn tag_value(self) -> u16 {
        match self {
            Compression::None => 1,
            Compression::Lzw => 5,
            Compression::Deflate => 8,
            Compression::DeflateLegacy => 32946,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Strips { rows_per_strip: u32 },
    Tiles { tile_width: u32, tile_height: u32 },
}

pub type PixelFn = dyn Fn(u32, u32, &mut [u8]) + Sync;

/// Pixel content of a page: an in-memory buffer or a generator for rasters
/// too large to hold.
pub enum Pixels {
    Buffer(Vec<u8>),
    /// Fills `out` (samples_per_pixel bytes) for pixel (x, y).
    Generated(Box<PixelFn>),
}

pub struct PageSpec {
    pub width: u32,
    pub height: u32,
    pub samples_per_pixel: u16,
    pub layout: Layout,
    pub compression: Compression,
    pub horizontal_predictor: bool,
    /// ModelPixelScale (sx, sy, sz), emitted as tag 33550 when present.
    pub pixel_scale: Option<[f64; 3]>,
    pub pixels: Pixels,
}

impl PageSpec {
    /// RGB page backed by a buffer, uncompressed, one strip per 64 rows.
    pub fn rgb(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize * 3);
        PageSpec {
            width,
            height,
            samples_per_pixel: 3,
            layout: Layout::Strips { rows_per_strip: 64 },
            compression: Compression::None,
            horizontal_predictor: false,
            pixel_scale: None,
            pixels: Pixels::Buffer(pixels),
        }
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    pub fn with_compression(mut self, compression: Compression) -> Self {
        self.compression = compression;
        self
    }

    pub fn with_pixel_scale(mut self, scale: [f64; 3]) -> Self {
        self.pixel_scale = Some(scale);
        self
    }

    pub fn with_predictor(mut self) -> Self {
        self.horizontal_predictor = true;
        self
    }

    fn sample(&self, x: u32, y: u32, out: &mut [u8]) {
        match &self.pixels {
            Pixels::Buffer(buf) => {
                let spp = self.samples_per_pixel as usize;
                let at = (y as usize * self.width as usize + x as usize) * spp;
                out.copy_from_slice(&buf[at..at + spp]);
            }
            Pixels::Generated(f) => f(x, y, out),
        }
    }

    /// Number of segments the page is split into.
    pub fn segment_count(&self) -> usize {
        match self.layout {
            Layout::Strips { rows_per_strip } => self.height.div_ceil(rows_per_strip) as usize,
            Layout::Tiles {
                tile_width,
                tile_height,
            } => {
                self.width.div_ceil(tile_width) as usize
                    * self.height.div_ceil(tile_height) as usize
            }
        }
    }

    /// Uncompressed bytes of one segment; tiles beyond the image edge are zero-filled.
    fn segment_raw(&self, index: usize) -> Vec<u8> {
        let spp = self.samples_per_pixel as usize;
        let (x0, y0, seg_w, seg_h, valid_w, valid_h) = match self.layout {
            Layout::Strips { rows_per_strip } => {
                let y0 = index as u32 * rows_per_strip;
                let h = rows_per_strip.min(self.height - y0);
                (0, y0, self.width, h, self.width, h)
            }
            Layout::Tiles {
                tile_width,
                tile_height,
            } => {
                let across = self.width.div_ceil(tile_width) as usize;
                let x0 = (index % across) as u32 * tile_width;
                let y0 = (index / across) as u32 * tile_height;
                (
                    x0,
                    y0,
                    tile_width,
                    tile_height,
                    tile_width.min(self.width - x0),
                    tile_height.min(self.height - y0),
                )
            }
        };
        let mut out = vec![0u8; seg_w as usize * seg_h as usize * spp];
        for row in 0..valid_h {
            for col in 0..valid_w {
                let at = (row as usize * seg_w as usize + col as usize) * spp;
                self.sample(x0 + col, y0 + row, &mut out[at..at + spp]);
            }
        }
        if self.horizontal_predictor {
            let row_bytes = seg_w as usize * spp;
            for row in out.chunks_mut(row_bytes) {
                for i in (spp..row.len()).rev() {
                    row[i] = row[i].wrapping_sub(row[i - spp]);
                }
            }
        }
        out
    }

    fn encode_segment(&self, index: usize) -> Vec<u8> {
        let raw = self.segment_raw(index);
        match self.compression {
            Compression::None => raw,
            Compression::Lzw => lzw::encode(&raw),
            Compression::Deflate | Compression::DeflateLegacy => {
                let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::fast());
                enc.write_all(&raw).expect("in-memory write");
                enc.finish().expect("in-memory write")
            }
        }
    }
}

/// Field types used by the writer.
#[derive(Clone, Copy)]
enum FieldType {
    Short = 3,
    Long = 4,
    Double = 12,
    Long8 = 16,
}

impl FieldType {
    fn size(self) -> usize {
        match self {
            FieldType::Short => 2,
            FieldType::Long => 4,
            FieldType::Double | FieldType::Long8 => 8,
        }
    }
}

enum Values {
    Ints(FieldType, Vec<u64>),
    Doubles(Vec<f64>),
}

struct Entry {
    tag: u16,
    values: Values,
}

impl Entry {
    fn shorts(tag: u16, v: Vec<u64>) -> Self {
        Entry {
            tag,
            values: Values::Ints(FieldType::Short, v),
        }
    }

    /// SHORT when every value fits, LONG otherwise.
    fn dims(tag: u16, v: u64) -> Self {
        let ty = if v <= u16::MAX as u64 {
            FieldType::Short
        } else {
            FieldType::Long
        };
        Entry {
            tag,
            values: Values::Ints(ty, vec![v]),
        }
    }

    fn field_type(&self) -> FieldType {
        match &self.values {
            Values::Ints(t, _) => *t,
            Values::Doubles(_) => FieldType::Double,
        }
    }

    fn count(&self) -> usize {
        match &self.values {
            Values::Ints(_, v) => v.len(),
            Values::Doubles(v) => v.len(),
        }
    }
}

struct Sink {
    buf: Vec<u8>,
    endian: Endian,
}

impl Sink {
    fn pos(&self) -> u64 {
        self.buf.len() as u64
    }

    fn align(&mut self) {
        if self.buf.len() % 2 == 1 {
            self.buf.push(0);
        }
    }

    fn put_uint(&mut self, v: u64, size: usize) {
        let bytes = v.to_le_bytes();
        match self.endian {
            Endian::Little => self.buf.extend_from_slice(&bytes[..size]),
            Endian::Big => self.buf.extend(bytes[..size].iter().rev()),
        }
    }

    fn put_f64(&mut self, v: f64) {
        self.put_uint(v.to_bits(), 8);
    }

    fn patch_uint(&mut self, at: u64, v: u64, size: usize) {
        let bytes = v.to_le_bytes();
        let at = at as usize;
        for i in 0..size {
            self.buf[at + i] = match self.endian {
                Endian::Little => bytes[i],
                Endian::Big => bytes[size - 1 - i],
            };
        }
    }

    fn put_values(&mut self, values: &Values) {
        match values {
            Values::Ints(t, v) => v.iter().for_each(|x| self.put_uint(*x, t.size())),
            Values::Doubles(v) => v.iter().for_each(|x| self.put_f64(*x)),
        }
    }
}

/// Serializes `pages` into a complete TIFF file image.
pub fn encode_tiff(variant: Variant, endian: Endian, pages: &[PageSpec]) -> Vec<u8> {
    assert!(!pages.is_empty());
    let mut s = Sink {
        buf: Vec::new(),
        endian,
    };
    s.buf.extend_from_slice(match endian {
        Endian::Little => b"II",
        Endian::Big => b"MM",
    });
    let (offset_size, count_size, entry_size, inline_size) = match variant {
        Variant::Classic => (4usize, 2usize, 12usize, 4usize),
        Variant::BigTiff => (8, 8, 20, 8),
    };
    let mut next_ptr = match variant {
        Variant::Classic => {
            s.put_uint(42, 2);
            let p = s.pos();
            s.put_uint(0, 4);
            p
        }
        Variant::BigTiff => {
            s.put_uint(43, 2);
            s.put_uint(8, 2);
            s.put_uint(0, 2);
            let p = s.pos();
            s.put_uint(0, 8);
            p
        }
    };
    let offset_type = match variant {
        Variant::Classic => FieldType::Long,
        Variant::BigTiff => FieldType::Long8,
    };

    for page in pages {
        let mut offsets = Vec::with_capacity(page.segment_count());
        let mut counts = Vec::with_capacity(page.segment_count());
        for i in 0..page.segment_count() {
            let data = page.encode_segment(i);
            s.align();
            offsets.push(s.pos());
            counts.push(data.len() as u64);
            s.buf.extend_from_slice(&data);
        }

        let spp = page.samples_per_pixel as u64;
        let mut entries = vec![
            Entry::dims(256, page.width as u64),
            Entry::dims(257, page.height as u64),
            Entry::shorts(258, vec![8; spp as usize]),
            Entry::shorts(259, vec![page.compression.tag_value() as u64]),
            Entry::shorts(262, vec![2]),
            Entry::shorts(277, vec![spp]),
            Entry::shorts(284, vec![1]),
            Entry::shorts(339, vec![1; spp as usize]),
        ];
        if spp > 3 {
            entries.push(Entry::shorts(338, vec![0; spp as usize - 3]));
        }
        if page.horizontal_predictor {
            entries.push(Entry::shorts(317, vec![2]));
        }
        match page.layout {
            Layout::Strips { rows_per_strip } => {
                entries.push(Entry::dims(278, rows_per_strip as u64));
                entries.push(Entry {
                    tag: 273,
                    values: Values::Ints(offset_type, offsets),
                });
                entries.push(Entry {
                    tag: 279,
                    values: Values::Ints(offset_type, counts),
                });
            }
            Layout::Tiles {
                tile_width,
                tile_height,
            } => {
                entries.push(Entry::dims(322, tile_width as u64));
                entries.push(Entry::dims(323, tile_height as u64));
                entries.push(Entry {
                    tag: 324,
                    values: Values::Ints(offset_type, offsets),
                });
                entries.push(Entry {
                    tag: 325,
                    values: Values::Ints(offset_type, counts),
                });
            }
        }
        if let Some(scale) = page.pixel_scale {
            entries.push(Entry {
                tag: 33550,
                values: Values::Doubles(scale.to_vec()),
            });
        }
        entries.sort_by_key(|e| e.tag);

        // Out-of-line values go first, then the directory that points at them.
        let mut external = Vec::with_capacity(entries.len());
        for e in &entries {
            let bytes = e.count() * e.field_type().size();
            if bytes > inline_size {
                s.align();
                external.push(Some(s.pos()));
                s.put_values(&e.values);
            } else {
                external.push(None);
            }
        }

        s.align();
        let ifd_at = s.pos();
        s.patch_uint(next_ptr, ifd_at, offset_size);
        s.put_uint(entries.len() as u64, count_size);
        for (e, ext) in entries.iter().zip(&external) {
            let start = s.pos();
            s.put_uint(e.tag as u64, 2);
            s.put_uint(e.field_type() as u64, 2);
            s.put_uint(e.count() as u64, count_size.max(4));
            match ext {
                Some(at) => s.put_uint(*at, offset_size),
                None => s.put_values(&e.values),
            }
            while s.pos() < start + entry_size as u64 {
                s.buf.push(0);
            }
        }
        next_ptr = s.pos();
        s.put_uint(0, offset_size);
    }
    if variant == Variant::Classic {
        assert!(s.buf.len() <= u32::MAX as usize, "classic TIFF over 4 GiB");
    }
    s.buf
}

pub fn write_tiff(
    path: &Path,
    variant: Variant,
    endian: Endian,
    pages: &[PageSpec],
) -> std::io::Result<()> {
    fs::write(path, encode_tiff(variant, endian, pages))
}

/// Deterministic RGB test pattern: smooth gradients with sparse noise and a
/// few exact-zero pixels so byte misplacement is always visible.
pub fn pattern_rgb<R: Rng>(rng: &mut R, width: u32, height: u32) -> Vec<u8> {
    let a: u32 = rng.gen_range(1..17);
    let b: u32 = rng.gen_range(1..17);
    let c: u32 = rng.gen();
    let mut out = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height {
        for x in 0..width {
            let base = x
                .wrapping_mul(a)
                .wrapping_add(y.wrapping_mul(b))
                .wrapping_add(c);
            if rng.gen_ratio(1, 64) {
                out.extend_from_slice(&[rng.gen(), rng.gen(), rng.gen()]);
            } else if rng.gen_ratio(1, 128) {
                out.extend_from_slice(&[0, 0, 0]);
            } else {
                out.extend_from_slice(&[base as u8, (base >> 3) as u8, (x ^ y) as u8]);
            }
        }
    }
    out
}

/// Fully random RGB bytes.
pub fn random_rgb<R: Rng>(rng: &mut R, width: u32, height: u32) -> Vec<u8> {
    let mut out = vec![0u8; width as usize * height as usize * 3];
    rng.fill(out.as_mut_slice());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_header_layout() {
        let page = PageSpec::rgb(2, 2, vec![1; 12]);
        let bytes = encode_tiff(Variant::Classic, Endian::Little, &[page]);
        assert_eq!(&bytes[..4], b"II\x2a\x00");
        let ifd = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(ifd % 2, 0);
        assert!(ifd < bytes.len());
    }

    #[test]
    fn bigtiff_header_layout() {
        let page = PageSpec::rgb(2, 2, vec![1; 12]);
        let bytes = encode_tiff(Variant::BigTiff, Endian::Big, &[page]);
        assert_eq!(&bytes[..8], b"MM\x00\x2b\x00\x08\x00\x00");
    }

    #[test]
    fn segment_counts() {
        let page = PageSpec::rgb(100, 130, vec![0; 100 * 130 * 3]).with_layout(Layout::Tiles {
            tile_width: 32,
            tile_height: 64,
        });
        assert_eq!(page.segment_count(), 4 * 3);
    }
}
