mod common;

use canopy::tiff_reader::{open_container, read_page};
use canopy::tiling::{
    account_chunk, extract_chunk, is_skippable, plan_grid, PaddedChunk, PixelAccount, TilingError,
};
use canopy_testkit::{random_rgb, Endian, Layout, PageSpec, Variant};
use common::*;
use proptest::prelude::*;
use rand::{rngs::StdRng, Rng, SeedableRng};
use tempfile::tempdir;

fn single_page(dir: &std::path::Path, spec: PageSpec) -> canopy::tiff_reader::PageDescriptor {
    let path = write_fixture(dir, "p.tif", Variant::Classic, Endian::Little, &[spec]);
    read_page(&open_container(path).unwrap(), 0).unwrap()
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
    assert!(matches!(
        plan_grid(0, 5, 640),
        Err(TilingError::ZeroDimension { .. })
    ));
    assert!(matches!(
        g.chunk("f", 1, 0),
        Err(TilingError::OutOfGrid { .. })
    ));
}

#[test]
fn grid_enumeration_is_row_major() {
    let g = plan_grid(1300, 700, 640).unwrap();
    let order: Vec<(u32, u32)> = g.refs("f").map(|r| (r.row, r.col)).collect();
    assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
    let last = g.chunk("f", 1, 2).unwrap();
    assert_eq!(
        (last.x0, last.y0, last.in_width, last.in_height),
        (1280, 640, 20, 60)
    );
}

#[test]
fn interior_chunk_has_no_padding() {
    let dir = tempdir().unwrap();
    let page = single_page(
        dir.path(),
        PageSpec::rgb(700, 650, solid(700, 650, [10, 20, 30])),
    );
    let grid = plan_grid(700, 650, 640).unwrap();
    let chunk = extract_chunk(&page, grid.chunk("p", 0, 0).unwrap()).unwrap();
    assert!(chunk.pixels().chunks_exact(3).all(|p| p == [10, 20, 30]));
    assert_eq!(
        account_chunk(&chunk),
        PixelAccount {
            total_pixels: 409_600,
            covered_pixels: 409_600
        }
    );
}

#[test]
fn margin_chunk_is_zero_padded() {
    let dir = tempdir().unwrap();
    let page = single_page(
        dir.path(),
        PageSpec::rgb(740, 640, solid(740, 640, [10, 20, 30])),
    );
    let grid = plan_grid(740, 640, 640).unwrap();
    let r = grid.chunk("p", 0, 1).unwrap();
    assert_eq!((r.in_width, r.in_height), (100, 640));
    let chunk = extract_chunk(&page, r).unwrap();
    for y in 0..640 {
        for x in 0..640 {
            let want = if x < 100 { [10, 20, 30] } else { [0, 0, 0] };
            assert_eq!(chunk.pixel(x, y), want, "({x}, {y})");
        }
    }
    assert_eq!(
        account_chunk(&chunk),
        PixelAccount {
            total_pixels: 64_000,
            covered_pixels: 64_000
        }
    );
}

#[test]
fn one_pixel_page() {
    let dir = tempdir().unwrap();
    let page = single_page(dir.path(), PageSpec::rgb(1, 1, vec![5, 6, 7]));
    let chunk = extract_chunk(
        &page,
        plan_grid(1, 1, 640).unwrap().chunk("p", 0, 0).unwrap(),
    )
    .unwrap();
    assert_eq!(chunk.pixel(0, 0), [5, 6, 7]);
    assert_eq!(
        chunk.pixels().iter().filter(|&&b| b == 0).count(),
        409_599 * 3
    );
    assert!(!is_skippable(&chunk));
}

#[test]
fn skippable_chunks() {
    let grid = plan_grid(640, 640, 640).unwrap();
    let r = grid.chunk("tiles_C1", 0, 0).unwrap();
    let mut pixels = vec![0u8; 640 * 640 * 3];
    let zero = PaddedChunk::from_pixels(r.clone(), pixels.clone());
    assert!(is_skippable(&zero));
    assert_eq!(
        account_chunk(&zero),
        PixelAccount {
            total_pixels: 409_600,
            covered_pixels: 0
        }
    );
    pixels[3 * 1000 + 2] = 1;
    assert!(!is_skippable(&PaddedChunk::from_pixels(r, pixels)));
}

#[test]
fn random_chunk_matches_double_loop() {
    let mut rng = StdRng::seed_from_u64(16);
    for _ in 0..20 {
        let grid = plan_grid(16, 16, 16).unwrap();
        let buf: Vec<u8> = (0..16 * 16 * 3)
            .map(|_| {
                if rng.gen_bool(0.4) {
                    rng.gen_range(1..=255)
                } else {
                    0
                }
            })
            .collect();
        let chunk = PaddedChunk::from_pixels(grid.chunk("f", 0, 0).unwrap(), buf.clone());
        let acc = account_chunk(&chunk);
        assert_eq!(acc.total_pixels, 256);
        assert_eq!(acc.covered_pixels, brute_force_covered(&buf, 16, 16));
    }
}

#[test]
fn padding_bytes_are_never_counted() {
    let grid = plan_grid(10, 7, 16).unwrap();
    let r = grid.chunk("f", 0, 0).unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    let mut buf = vec![0u8; 16 * 16 * 3];
    for y in 0..7 {
        for x in 0..10 {
            let i = (y * 16 + x) * 3;
            buf[i] = rng.gen_range(0..3);
        }
    }
    let original = account_chunk(&PaddedChunk::from_pixels(r.clone(), buf.clone()));
    for y in 0..16usize {
        for x in 0..16usize {
            if x >= 10 || y >= 7 {
                buf[(y * 16 + x) * 3 + 1] = 200;
            }
        }
    }
    assert_eq!(account_chunk(&PaddedChunk::from_pixels(r, buf)), original);
}

#[test]
fn file_total_is_raw_page_area() {
    // 828993608 is not a multiple of 640²; totals must not be rows·cols·640².
    assert_ne!(828_993_608 % 409_600, 0);
    let grid = plan_grid(1000, 700, 640).unwrap();
    let total: u64 = grid.refs("f").map(|r| r.in_bounds_pixels()).sum();
    assert_eq!(total, 700_000);
    assert_ne!(total, grid.len() as u64 * 409_600);
}

#[test]
fn extraction_through_tiles_and_strips_agrees() {
    let dir = tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(77);
    let (w, h) = (150, 90);
    let buf = random_rgb(&mut rng, w, h);
    let strips = single_page(dir.path(), PageSpec::rgb(w, h, buf.clone()));
    let tiled_path = write_fixture(
        dir.path(),
        "t.tif",
        Variant::BigTiff,
        Endian::Big,
        &[PageSpec::rgb(w, h, buf).with_layout(Layout::Tiles {
            tile_width: 32,
            tile_height: 48,
        })],
    );
    let tiles = read_page(&open_container(tiled_path).unwrap(), 0).unwrap();
    let grid = plan_grid(w, h, 64).unwrap();
    for r in grid.refs("x") {
        let a = extract_chunk(&strips, r.clone()).unwrap();
        let b = extract_chunk(&tiles, r).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn partition_covers_page(w in 1u32..2000, h in 1u32..2000, cs in prop::sample::select(vec![1u32, 7, 64, 640, 2048])) {
        prop_assume!(cs > 1 || w * h <= 40_000);
        let grid = plan_grid(w, h, cs).unwrap();
        prop_assert_eq!(grid.len() as u64, (h.div_ceil(cs) as u64) * (w.div_ceil(cs) as u64));
        let mut total = 0u64;
        for r in grid.refs("f") {
            prop_assert!(r.in_width >= 1 && r.in_height >= 1);
            prop_assert_eq!(r.in_width, cs.min(w - r.x0));
            prop_assert_eq!(r.in_height, cs.min(h - r.y0));
            total += r.in_bounds_pixels();
        }
        prop_assert_eq!(total, w as u64 * h as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn covered_sum_matches_whole_page(seed in any::<u64>(), w in 1u32..90, h in 1u32..90, cs in 1u32..40) {
        let mut rng = StdRng::seed_from_u64(seed);
        let buf: Vec<u8> = (0..w * h * 3)
            .map(|_| if rng.gen_bool(0.3) { rng.gen() } else { 0 })
            .collect();
        let dir = tempdir().unwrap();
        let page = single_page(dir.path(), PageSpec::rgb(w, h, buf.clone()));
        let grid = plan_grid(w, h, cs).unwrap();
        let sum: PixelAccount = grid
            .refs("p")
            .map(|r| account_chunk(&extract_chunk(&page, r).unwrap()))
            .sum();
        prop_assert_eq!(sum.total_pixels, w as u64 * h as u64);
        prop_assert_eq!(sum.covered_pixels, brute_force_covered(&buf, w, h));
    }
}
