#![allow(dead_code)]

use std::path::{Path, PathBuf};

use canopy_testkit::{encode_tiff, Endian, PageSpec, Variant};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

/// Writes `pages` to `dir/name` and returns the path.
pub fn write_fixture(
    dir: &Path,
    name: &str,
    variant: Variant,
    endian: Endian,
    pages: &[PageSpec],
) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, encode_tiff(variant, endian, pages)).unwrap();
    path
}

/// A solid RGB buffer.
pub fn solid(width: u32, height: u32, rgb: [u8; 3]) -> Vec<u8> {
    rgb.iter()
        .copied()
        .cycle()
        .take(width as usize * height as usize * 3)
        .collect()
}

/// `pages` copies of a page built by `make`, index passed through.
pub fn pages(count: usize, make: impl Fn(usize) -> PageSpec) -> Vec<PageSpec> {
    (0..count).map(make).collect()
}

/// Extracts the sub-rectangle of a row-major RGB buffer.
pub fn crop(buf: &[u8], width: u32, x0: u32, y0: u32, w: u32, h: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(w as usize * h as usize * 3);
    for y in y0..y0 + h {
        let start = (y as usize * width as usize + x0 as usize) * 3;
        out.extend_from_slice(&buf[start..start + w as usize * 3]);
    }
    out
}

/// Count of pixels with any nonzero channel, straight double loop.
pub fn brute_force_covered(buf: &[u8], width: u32, height: u32) -> u64 {
    let mut n = 0;
    for y in 0..height as usize {
        for x in 0..width as usize {
            let i = (y * width as usize + x) * 3;
            if buf[i] != 0 || buf[i + 1] != 0 || buf[i + 2] != 0 {
                n += 1;
            }
        }
    }
    n
}

/// Reference survey rows: (file, total, covered, segmentation, cover %, segmentation %).
pub const REFERENCE_ROWS: [(&str, u64, u64, u64, &str, &str); 12] = [
    (
        "tiles_A1", 828993608, 805825983, 207039870, "97.21", "25.69",
    ),
    (
        "tiles_A2", 744243200, 728376716, 234227055, "97.87", "32.16",
    ),
    (
        "tiles_A3", 534528000, 520829738, 114770426, "97.44", "22.04",
    ),
    ("tiles_A4", 261734400, 238869853, 63516343, "91.26", "26.59"),
    (
        "tiles_B1", 531251200, 506459873, 145942301, "95.33", "28.82",
    ),
    (
        "tiles_B2", 1296793600, 1291256063, 296591367, "99.57", "22.97",
    ),
    (
        "tiles_B3", 1329971200, 1329971200, 377455942, "100.00", "28.38",
    ),
    (
        "tiles_B4", 1172275200, 1154281912, 268610694, "98.47", "23.27",
    ),
    ("tiles_C1", 409600, 0, 0, "0.00", "NaN"),
    ("tiles_C2", 221991680, 212491798, 55063430, "95.72", "25.91"),
    (
        "tiles_C3", 793804800, 776495613, 204207191, "97.82", "26.30",
    ),
    (
        "tiles_C4", 735641600, 710077553, 274924444, "96.52", "38.72",
    ),
];

/// Half-up rounding to 2 decimals by exact rational arithmetic on the digit
/// expansion, written independently of the library formatter.
pub fn oracle_percent(num: u64, den: u64) -> String {
    if den == 0 {
        return "NaN".into();
    }
    // Truncated thousandths of a percent; a third digit of 5 or more means
    // the value is at or past the halfway point.
    let milli = num as u128 * 100_000 / den as u128;
    let mut hundredths = milli / 10;
    if milli % 10 >= 5 {
        hundredths += 1;
    }
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

pub const GREEN: [u8; 3] = [40, 180, 50];
pub const GRAY: [u8; 3] = [120, 110, 100];

/// Green wherever (7x + 3y) mod 100 < 33 and x < `lit_width`, gray elsewhere
/// in that band, zero beyond it. Every full run of 100 columns is exactly 33%
/// green, so the canopy fraction of covered pixels is 33/100 whenever
/// `lit_width` is a multiple of 100.
pub fn green_scene(width: u32, height: u32, lit_width: u32) -> Vec<u8> {
    let mut buf = vec![0u8; width as usize * height as usize * 3];
    for y in 0..height {
        for x in 0..width.min(lit_width) {
            let rgb = if (7 * x + 3 * y) % 100 < 33 {
                GREEN
            } else {
                GRAY
            };
            let i = (y as usize * width as usize + x as usize) * 3;
            buf[i..i + 3].copy_from_slice(&rgb);
        }
    }
    buf
}

/// Seven pages where only page 2 carries `band2`; the others are solid green
/// so that reading the wrong page changes every count.
pub fn seven_band_pages(width: u32, height: u32, band2: Vec<u8>) -> Vec<PageSpec> {
    let mut out = pages(7, |_| {
        PageSpec::rgb(width, height, solid(width, height, GREEN))
    });
    out[2] = PageSpec::rgb(width, height, band2);
    out
}

/// Canopy pixels under ExG > tau, by direct loop over the whole image.
pub fn brute_force_threshold(buf: &[u8], tau: i32) -> u64 {
    buf.chunks_exact(3)
        .filter(|p| {
            let nonzero = p.iter().any(|&b| b != 0);
            let exg = 2 * p[1] as i32 - p[0] as i32 - p[2] as i32;
            nonzero && exg > tau
        })
        .count() as u64
}
