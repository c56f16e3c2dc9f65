use std::fs;

use super::*;
use crate::contour_ops::{dilate, erode, trace_contours};
use crate::metrics::{boundary_f1, chamfer_with, ChamferMode, PointSet};

fn cfg(size: usize, translucency: f64, severity: f64) -> SynthConfig {
    SynthConfig { size, translucency, severity }
}

fn contour_points(mask: &BinaryImage) -> PointSet {
    PointSet::from_image(&contour_from_mask(mask, 1).unwrap())
}

fn disk(size: usize, radius: f64) -> BinaryImage {
    let c = size as f64 / 2.0 - 0.5;
    BinaryImage::from_fn(size, size, |r, x| (r as f64 - c).powi(2) + (x as f64 - c).powi(2) <= radius * radius)
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = cfg(40, 0.4, 0.5);
    let ma = generate_synthetic_dataset(a.path(), &c, 11, 3, 2).unwrap();
    let mb = generate_synthetic_dataset(b.path(), &c, 11, 3, 2).unwrap();
    assert_eq!(ma.entries, mb.entries);
    for e in &ma.entries {
        for f in [&e.image, &e.gt, e.guide.as_ref().unwrap()] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    let other = generate_samples(&c, 12, 1, 0).unwrap();
    assert_ne!(other[0].image, generate_samples(&c, 11, 1, 0).unwrap()[0].image);
}

fn gradient(img: &GrayImage, r: usize, c: usize) -> f64 {
    let g = |y: usize, x: usize| img.get(y, x);
    let gy = (g(r + 1, c) - g(r - 1, c)) / 2.0;
    let gx = (g(r, c + 1) - g(r, c - 1)) / 2.0;
    (gy * gy + gx * gx).sqrt()
}

/// Mean gradient magnitude on the mask boundary over that deep inside it.
fn edge_ratio(img: &GrayImage, mask: &BinaryImage) -> f64 {
    let inner = erode(mask, 3);
    let ring = BinaryImage::from_fn(mask.height(), mask.width(), |r, c| {
        mask.get(r, c) && !erode(mask, 1).get(r, c)
    });
    let mean = |m: &BinaryImage| {
        let px = m.on_pixels();
        px.iter().map(|&(r, c)| gradient(img, r, c)).sum::<f64>() / px.len() as f64
    };
    mean(&ring) / mean(&inner)
}

#[test]
fn opaque_shapes_have_sharp_edges() {
    let samples = generate_samples(&cfg(64, 0.0, 0.0), 3, 10, 0).unwrap();
    for s in &samples {
        let ratio = edge_ratio(&s.image, &s.gt_mask);
        assert!(ratio >= 5.0, "{}: ratio {ratio}", s.id);
    }
    let soft = generate_samples(&cfg(64, 1.0, 0.0), 3, 10, 0).unwrap();
    let mean_sharp: f64 = samples.iter().map(|s| edge_ratio(&s.image, &s.gt_mask)).sum::<f64>();
    let mean_soft: f64 = soft.iter().map(|s| edge_ratio(&s.image, &s.gt_mask)).sum::<f64>();
    assert!(mean_soft < mean_sharp);
}

#[test]
fn ground_truth_masks_are_single_solid_blobs() {
    for s in generate_samples(&cfg(64, 0.5, 0.5), 5, 40, 10).unwrap() {
        let cs = trace_contours(&s.gt_mask);
        assert_eq!(cs.len(), 1, "{}", s.id);
        assert!(cs[0].closed);
        assert!(s.gt_mask.count() as f64 >= 0.02 * 64.0 * 64.0);
        assert_eq!(largest_component(&s.guide_mask), s.guide_mask);
        assert!(!s.guide_mask.is_empty());
    }
}

#[test]
fn degrade_identity_and_determinism() {
    let (_, mask) = synth_sample(&cfg(64, 0.3, 0.5), 9, 0);
    assert_eq!(degrade_mask(&mask, 0.0, 1), mask);
    assert_eq!(degrade_mask(&mask, 0.5, 1), degrade_mask(&mask, 0.5, 1));
    assert_ne!(degrade_mask(&mask, 0.5, 1), degrade_mask(&mask, 0.5, 2));
}

#[test]
fn half_severity_guides_leave_headroom() {
    let c = cfg(64, 0.3, 0.5);
    let samples = generate_samples(&c, 21, 40, 0).unwrap();
    let f1s: Vec<f64> = samples
        .iter()
        .map(|s| boundary_f1(&contour_points(&s.guide_mask), &contour_points(&s.gt_mask), 3.0).unwrap())
        .collect();
    let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
    assert!(mean > 0.2 && mean < 0.95, "mean F1 {mean}");
    let inside = f1s.iter().filter(|&&f| f > 0.2 && f < 0.95).count();
    assert!(inside * 10 >= f1s.len() * 9, "{f1s:?}");
}

#[test]
fn displacement_grows_with_severity() {
    let masks: Vec<BinaryImage> = (0..100).map(|i| synth_sample(&cfg(64, 0.3, 0.0), 4, i).1).collect();
    let mut last = 0.0;
    for sev in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mean: f64 = masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let g = contour_points(m);
                let d = contour_points(&degrade_mask(m, sev, i as u64));
                chamfer_with(&d, &g, ChamferMode::Mean).unwrap()
            })
            .sum::<f64>()
            / masks.len() as f64;
        assert!(mean >= last, "severity {sev}: {mean} < {last}");
        last = mean;
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_samples(&cfg(36, 0.5, 0.6), 2, 4, 3).unwrap();
    let m = save_dataset(&samples, dir.path(), 2, None).unwrap();
    assert_eq!(m.count(Split::Train), 4);
    let loaded = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.samples, samples);
    assert_eq!(loaded.split(Split::Eval).len(), 3);
    assert_eq!(loaded.manifest.entries, m.entries);
}

#[test]
fn missing_guide_is_rebuilt_from_generator_settings() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(40, 0.2, 0.5);
    let mut m = generate_synthetic_dataset(dir.path(), &c, 8, 2, 1).unwrap();
    for e in &mut m.entries {
        e.guide = None;
    }
    m.write().unwrap();
    let loaded = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
    let expected = generate_samples(&c, 8, 2, 1).unwrap();
    assert_eq!(loaded.samples, expected);
}

#[test]
fn load_errors_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir.path(), &cfg(32, 0.2, 0.5), 1, 2, 0).unwrap();
    fs::remove_file(dir.path().join("masks/train-0001.png")).unwrap();
    let err = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap_err().to_string();
    assert!(err.contains("train-0001"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let mut m = generate_synthetic_dataset(dir.path(), &cfg(32, 0.2, 0.5), 1, 2, 0).unwrap();
    m.entries[1].id = m.entries[0].id.clone();
    m.write().unwrap();
    assert!(load_dataset(&dir.path().join(MANIFEST_FILE)).is_err());

    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir.path(), &cfg(32, 0.2, 0.5), 1, 1, 0).unwrap();
    write_mask_png(&dir.path().join("guides/train-0000.png"), &BinaryImage::new(32, 33)).unwrap();
    let err = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap_err().to_string();
    assert!(err.contains("train-0000"), "{err}");
}

#[test]
fn manifest_with_two_splits() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir.path(), &cfg(32, 0.3, 0.5), 5, 200, 40).unwrap();
    let d = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(d.split(Split::Train).len(), 200);
    assert_eq!(d.split(Split::Eval).len(), 40);
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(text.starts_with("version = 1"));
}

#[test]
fn condition_assembly() {
    let s = &generate_samples(&cfg(64, 0.3, 0.5), 6, 1, 0).unwrap()[0];
    let cond = assemble_condition(s, 64).unwrap();
    assert_eq!(cond.channels(), 2);
    let img: Vec<f32> = s.image.values().iter().map(|&v| v as f32).collect();
    assert_eq!(cond.channel(0), &img[..]);
    assert_eq!(cond.guide_mask(), s.guide_mask);

    let small = assemble_condition(s, 32).unwrap();
    assert!(small.channel(1).iter().all(|&v| v == 0.0 || v == 1.0));

    let big = GrayImage::from_fn(704, 704, |r, c| ((r * 7 + c * 3) % 256) as f64 / 255.0);
    let half = resize_bilinear(&big, 352, 352);
    assert_eq!((half.height(), half.width()), (352, 352));
    for &(r, c) in &[(0, 0), (10, 200), (351, 351)] {
        let avg = (big.get(2 * r, 2 * c) + big.get(2 * r + 1, 2 * c) + big.get(2 * r, 2 * c + 1) + big.get(2 * r + 1, 2 * c + 1)) / 4.0;
        assert!((half.get(r, c) - avg).abs() < 1e-12);
    }
    let m = resize_nearest(&BinaryImage::from_fn(704, 704, |r, _| r < 300), 352, 352);
    assert_eq!((m.height(), m.width()), (352, 352));
    assert!(m.get(149, 0) && !m.get(150, 0));
}

#[test]
fn targets_from_disks() {
    for radius in [10.0, 14.0, 20.0] {
        let mask = disk(64, radius);
        let s = Sample {
            id: "d".into(),
            split: Split::Train,
            image: GrayImage::new(64, 64),
            gt_mask: mask.clone(),
            guide_mask: mask,
        };
        let t1 = make_target(&s, 64, 1, 8).unwrap();
        let t2 = make_target(&s, 64, 2, 8).unwrap();
        assert!(t2.is_one_hot());
        let on = |g: &CategoricalGrid| g.argmax().iter().filter(|&&k| k == 7).count() as f64;
        assert!(g_is_binary(&t2));
        let ratio = on(&t2) / on(&t1);
        // A 2x2 stamp covers three pixels per diagonal step, so rings come
        // out a little above twice the thin count.
        assert!((2.0..=2.5).contains(&ratio), "radius {radius}: ratio {ratio}");
        let ring = BinaryImage::from_vec(64, 64, t1.argmax().iter().map(|&k| k == 7).collect()).unwrap();
        let cs = trace_contours(&ring);
        assert_eq!(cs.len(), 1);
        assert!(cs[0].closed);
        assert!(ring.is_subset_of(&s.gt_mask) && !ring.is_subset_of(&erode(&s.gt_mask, 1)));
        assert!(dilate(&ring, 0) == ring);
    }
    let empty = Sample {
        id: "e".into(),
        split: Split::Eval,
        image: GrayImage::new(32, 32),
        gt_mask: BinaryImage::new(32, 32),
        guide_mask: BinaryImage::new(32, 32),
    };
    assert!(make_target(&empty, 32, 2, 8).unwrap_err().to_string().contains("\"e\""));
}

fn g_is_binary(g: &CategoricalGrid) -> bool {
    g.argmax().iter().all(|&k| k == 0 || k == 7)
}

