use std::fs;

use dsod::data::*;
use dsod::Error;
use proptest::prelude::*;

fn px(v: f32, n: usize) -> usize {
    (v * n as f32).round() as usize
}

/// Tight shape-pixel box around each annotation (searched with a margin) must equal it to 1 px.
fn assert_pixel_consistent(s: &Sample) {
    let n = s.image.width;
    for b in &s.boxes {
        let r = b.rect;
        let m = 2;
        let (x0, y0) = (px(r.xmin, n).saturating_sub(m), px(r.ymin, n).saturating_sub(m));
        let (x1, y1) = (px(r.xmax, n) + m, px(r.ymax, n) + m);
        let t = s.image.shape_bbox(x0, y0, x1, y1).expect("shape pixels under annotation");
        let got = [t.0, t.1, t.2, t.3];
        let want = [px(r.xmin, n), px(r.ymin, n), px(r.xmax, n), px(r.ymax, n)];
        for (g, w) in got.iter().zip(want) {
            assert!(g.abs_diff(w) <= 1, "sample {}: pixel box {got:?} vs annotation {want:?}", s.id);
        }
    }
}

#[test]
fn generated_dataset_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(6, 3, 64, 42, a.path()).unwrap();
    generate_dataset(6, 3, 64, 42, b.path()).unwrap();
    for f in ["manifest.txt", "annotations.txt", "images/000000.ppm", "images/000005.ppm"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    generate_dataset(6, 3, 64, 43, c.path()).unwrap();
    assert_ne!(fs::read(a.path().join("annotations.txt")).unwrap(), fs::read(c.path().join("annotations.txt")).unwrap());
}

#[test]
fn shapes_obey_generation_contract() {
    for i in 0..200 {
        let s = generate_sample(i, 3, 96, 7);
        s.validate().unwrap();
        assert!((1..=3).contains(&s.boxes.len()));
        assert_pixel_consistent(&s);
        for b in &s.boxes {
            assert!((b.rect.width() * b.rect.height()) as f64 >= MIN_SHAPE_AREA - 1e-6);
        }
    }
}

#[test]
fn single_class_dataset() {
    for i in 0..30 {
        assert!(generate_sample(i, 1, 64, 1).boxes.iter().all(|b| b.class_id == 1));
    }
}

#[test]
fn ppm_roundtrip_and_errors() {
    let s = generate_sample(3, 3, 40, 9);
    let bytes = encode_ppm(&s.image);
    assert_eq!(decode_ppm(&bytes).unwrap(), s.image);
    assert!(matches!(decode_ppm(&bytes[..bytes.len() - 5]), Err(Error::Data { .. })));
    assert!(matches!(decode_ppm(b"P6\n40"), Err(Error::Data { .. })));
    assert!(matches!(decode_ppm(b"P3\n1 1\n255\n000"), Err(Error::Data { line: Some(1), .. })));
    let commented = b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03";
    assert_eq!(decode_ppm(commented).unwrap().pixels, vec![1, 2, 3]);
}

#[test]
fn annotation_validation() {
    let ok = parse_annotations("000001 2 0.100000 0.200000 0.300000 0.400000\n", 3).unwrap();
    assert_eq!(ok[0].1.class_id, 2);
    let line_of = |text: &str| match parse_annotations(text, 3) {
        Err(Error::Data { line, .. }) => line,
        other => panic!("{other:?}"),
    };
    assert_eq!(line_of("000001 1 0.1 0.1 0.2 0.2\n000002 1 0.5 0.1 0.4 0.2\n"), Some(2));
    assert_eq!(line_of("000001 4 0.1 0.1 0.2 0.2\n"), Some(1));
    assert_eq!(line_of("000001 1 0.1 0.1 0.2\n"), Some(1));
    assert_eq!(line_of("000001 1 0.1 0.1 0.2 1.5\n"), Some(1));
}

#[test]
fn dataset_roundtrip_and_missing_image() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(4, 2, 48, 5, dir.path()).unwrap();
    let d = Dataset::load(dir.path()).unwrap();
    assert_eq!(d.manifest, m);
    for (i, s) in d.samples.iter().enumerate() {
        let g = generate_sample(i as u64, 2, 48, 5);
        assert_eq!(s.image, g.image);
        assert_eq!(s.boxes.len(), g.boxes.len());
        for (a, b) in s.boxes.iter().zip(&g.boxes) {
            assert!((a.rect.xmax - b.rect.xmax).abs() < 1e-6 && a.class_id == b.class_id);
        }
    }
    fs::remove_file(dir.path().join("images/000002.ppm")).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn flip_examples() {
    let s = generate_sample(11, 3, 64, 2);
    let twice = flip_horizontal(&flip_horizontal(&s));
    assert_eq!(twice.image, s.image);
    for (a, b) in twice.boxes.iter().zip(&s.boxes) {
        assert!((a.rect.xmin - b.rect.xmin).abs() < 1e-6 && (a.rect.xmax - b.rect.xmax).abs() < 1e-6);
    }
    let once = flip_horizontal(&s);
    for (a, b) in once.boxes.iter().zip(&s.boxes) {
        assert!((a.rect.xmin - (1.0 - b.rect.xmax)).abs() < 1e-6);
    }
    assert_pixel_consistent(&once);
}

#[test]
fn crop_keeps_annotations_on_pixels() {
    for i in 0..100 {
        let s = generate_sample(i, 3, 96, 4);
        let c = crop_resize(&s, CropPlan { x0: 10, y0: 5, w: 70, h: 80 });
        c.validate().unwrap();
        assert_pixel_consistent(&c);
    }
    let full = generate_sample(0, 3, 96, 4);
    let same = crop_resize(&full, CropPlan { x0: 0, y0: 0, w: 96, h: 96 });
    assert_eq!(same, full);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn augment_is_valid_and_deterministic(index in 0u64..1000, seed in any::<u64>()) {
        let s = generate_sample(index, 3, 80, 3);
        let a = augment(&s, seed);
        prop_assert_eq!(&a, &augment(&s, seed));
        a.validate().unwrap();
        prop_assert!(!a.boxes.is_empty());
        assert_pixel_consistent(&a);
    }
}
