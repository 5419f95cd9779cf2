use std::fs;

use canopy::segmentation::CanopyMask;
use canopy::store::{
    chunk_name, layout, overlay_pixels, parse_chunk_name, Manifest, ManifestEntry, Store,
    StoreError, MAX_INDEX,
};
use canopy::tiff_reader::PixelScale;
use canopy::tiling::{plan_grid, PaddedChunk};
use proptest::prelude::*;
use rand::{rngs::StdRng, Rng, SeedableRng};
use tempfile::tempdir;

fn random_chunk(rng: &mut StdRng, file: &str, row: u32, col: u32) -> PaddedChunk {
    let grid = plan_grid(640 * 20, 640 * 20, 640).unwrap();
    let r = grid.chunk(file, row, col).unwrap();
    PaddedChunk::from_pixels(r, (0..640 * 640 * 3).map(|_| rng.gen()).collect())
}

fn sample_manifest(rng: &mut StdRng) -> Manifest {
    let (w, h, cs) = (rng.gen_range(1..3000), rng.gen_range(1..3000), 640);
    let grid = plan_grid(w, h, cs).unwrap();
    let entries = grid
        .refs("site")
        .map(|r| {
            let covered = rng.gen_range(0..=r.in_bounds_pixels());
            ManifestEntry {
                row: r.row,
                col: r.col,
                in_width: r.in_width,
                in_height: r.in_height,
                covered_pixels: covered,
                segmentation_pixels: Some(rng.gen_range(0..=covered)),
                skipped: covered == 0,
            }
        })
        .collect();
    Manifest {
        file_name: "site".into(),
        page_index: 2,
        page_width: w,
        page_height: h,
        chunk_size: cs,
        rows: grid.rows,
        cols: grid.cols,
        estimator: Some("threshold(tau=40)".into()),
        geo_scale: Some(PixelScale { sx: 0.1, sy: 0.15 }),
        entries,
    }
}

#[test]
fn chunk_path_follows_naming_rule() {
    let dir = tempdir().unwrap();
    let store = Store::open(dir.path());
    let chunk = random_chunk(&mut StdRng::seed_from_u64(1), "tiles_A1", 3, 12);
    let key = store.write_chunk(&chunk).unwrap();
    assert_eq!(key, "tiles_A1/chunks/r00003_c00012.png");
    assert!(dir
        .path()
        .join("tiles_A1/chunks/r00003_c00012.png")
        .is_file());
}

#[test]
fn chunk_png_round_trip_is_pixel_exact() {
    let dir = tempdir().unwrap();
    let store = Store::open(dir.path());
    let chunk = random_chunk(&mut StdRng::seed_from_u64(2), "f", 0, 0);
    let key = store.write_chunk(&chunk).unwrap();
    assert_eq!(store.read_chunk(&chunk.chunk_ref).unwrap().unwrap(), chunk);

    // decode independently of the store
    let img = image::open(store.path_of(&key)).unwrap();
    assert_eq!(img.color(), image::ColorType::Rgb8);
    assert_eq!((img.width(), img.height()), (640, 640));
    assert_eq!(img.into_rgb8().into_raw(), chunk.pixels());
}

#[test]
fn writes_are_idempotent_and_leave_no_temp_files() {
    let dir = tempdir().unwrap();
    let store = Store::open(dir.path());
    let chunk = random_chunk(&mut StdRng::seed_from_u64(3), "f", 1, 2);
    let key = store.write_chunk(&chunk).unwrap();
    let first = fs::read(store.path_of(&key)).unwrap();
    store.write_chunk(&chunk).unwrap();
    assert_eq!(fs::read(store.path_of(&key)).unwrap(), first);
    let names: Vec<String> = fs::read_dir(dir.path().join("f/chunks"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["r00001_c00002.png"]);
}

#[test]
fn missing_artifacts_read_as_none() {
    let dir = tempdir().unwrap();
    let store = Store::open(dir.path());
    let r = plan_grid(10, 10, 10).unwrap().chunk("f", 0, 0).unwrap();
    assert!(store.read_chunk(&r).unwrap().is_none());
    assert!(store.read_detections(&r).unwrap().is_none());
    assert!(store.read_manifest("f").unwrap().is_none());
}

#[test]
fn overlay_examples() {
    let r = plan_grid(2, 1, 2).unwrap().chunk("f", 0, 0).unwrap();
    let chunk = PaddedChunk::from_pixels(r.clone(), vec![0, 0, 0, 100, 50, 200, 0, 0, 0, 0, 0, 0]);
    let none = CanopyMask::empty(r.clone());
    assert_eq!(overlay_pixels(&chunk, &none, 0.4).unwrap(), chunk.pixels());

    let mut mask = CanopyMask::empty(r.clone());
    mask.set(0, 0, true);
    mask.set(1, 0, true);
    let out = overlay_pixels(&chunk, &mask, 0.4).unwrap();
    assert_eq!(&out[..3], &[0, 102, 0]);
    // 0.6·100 = 60; 0.6·50 + 102 = 132; 0.6·200 = 120
    assert_eq!(&out[3..6], &[60, 132, 120]);
    assert_eq!(&out[6..], &chunk.pixels()[6..]);

    let full = overlay_pixels(&chunk, &mask, 1.0).unwrap();
    assert_eq!(&full[..6], &[0, 255, 0, 0, 255, 0]);

    assert!(matches!(
        overlay_pixels(&chunk, &mask, 1.5),
        Err(StoreError::InvalidAlpha(_))
    ));
    let other = plan_grid(2, 1, 2).unwrap().chunk("g", 0, 0).unwrap();
    assert!(matches!(
        overlay_pixels(&chunk, &CanopyMask::empty(other), 0.4),
        Err(StoreError::RefMismatch)
    ));

    let dir = tempdir().unwrap();
    let store = Store::open(dir.path());
    let key = store.write_overlay(&chunk, &mask, 0.4).unwrap();
    assert_eq!(key, "f/overlays/r00000_c00000.png");
    assert_eq!(
        image::open(store.path_of(&key))
            .unwrap()
            .into_rgb8()
            .into_raw(),
        out
    );
}

#[test]
fn manifest_round_trip() {
    let dir = tempdir().unwrap();
    let store = Store::open(dir.path());
    let mut rng = StdRng::seed_from_u64(4);
    for _ in 0..10 {
        let m = sample_manifest(&mut rng);
        assert_eq!(store.write_manifest(&m).unwrap(), "site/manifest.json");
        assert_eq!(store.read_manifest("site").unwrap().unwrap(), m);
    }
}

#[test]
fn manifest_field_names() {
    let m = sample_manifest(&mut StdRng::seed_from_u64(5));
    let json: serde_json::Value = serde_json::to_value(&m).unwrap();
    for k in [
        "fileName",
        "pageIndex",
        "pageWidth",
        "pageHeight",
        "chunkSize",
        "rows",
        "cols",
        "entries",
    ] {
        assert!(json.get(k).is_some(), "{k}");
    }
    let e = &json["entries"][0];
    for k in [
        "row",
        "col",
        "inWidth",
        "inHeight",
        "coveredPixels",
        "skipped",
    ] {
        assert!(e.get(k).is_some(), "{k}");
    }
}

#[test]
fn corrupt_manifests_are_rejected() {
    let dir = tempdir().unwrap();
    let store = Store::open(dir.path());
    let mut m = sample_manifest(&mut StdRng::seed_from_u64(6));
    m.entries.pop();
    store.write_manifest(&m).unwrap();
    assert!(matches!(
        store.read_manifest("site"),
        Err(StoreError::CorruptManifest { .. })
    ));

    store.put("site/manifest.json", b"{ not json").unwrap();
    assert!(matches!(
        store.read_manifest("site"),
        Err(StoreError::CorruptManifest { .. })
    ));

    let mut m = sample_manifest(&mut StdRng::seed_from_u64(7));
    m.entries[0].skipped = !m.entries[0].skipped;
    store.write_manifest(&m).unwrap();
    assert!(matches!(
        store.read_manifest("site"),
        Err(StoreError::CorruptManifest { .. })
    ));
}

#[test]
fn reserved_and_unsafe_names_rejected() {
    let grid = plan_grid(4, 4, 4).unwrap();
    for bad in ["", "../x", "a/b", ".hidden", "coverage.csv", "summary.json"] {
        let r = grid.chunk(bad, 0, 0).unwrap();
        assert!(
            matches!(layout::chunk_key(&r), Err(StoreError::InvalidName(_))),
            "{bad:?}"
        );
    }
    assert!(matches!(
        chunk_name(MAX_INDEX + 1, 0),
        Err(StoreError::IndexTooLarge { .. })
    ));
}

proptest! {
    #[test]
    fn chunk_names_are_a_bijection(row in 0..=MAX_INDEX, col in 0..=MAX_INDEX, row2 in 0..=MAX_INDEX, col2 in 0..=MAX_INDEX) {
        let a = chunk_name(row, col).unwrap();
        prop_assert_eq!(a.len(), 13);
        prop_assert_eq!(parse_chunk_name(&a), Some((row, col)));
        let b = chunk_name(row2, col2).unwrap();
        prop_assert_eq!(a == b, (row, col) == (row2, col2));
        // lexicographic order follows row-major order
        prop_assert_eq!(a.cmp(&b), (row, col).cmp(&(row2, col2)));
    }

    #[test]
    fn malformed_names_do_not_parse(s in "[rc_0-9]{0,14}") {
        if let Some((r, c)) = parse_chunk_name(&s) {
            prop_assert_eq!(chunk_name(r, c).unwrap(), s);
        }
    }
}
