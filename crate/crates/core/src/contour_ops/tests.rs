use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn from_rows(rows: &[&str]) -> BinaryImage {
    let h = rows.len();
    let w = rows[0].len();
    BinaryImage::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#')
}

fn disk(h: usize, w: usize, cy: f64, cx: f64, radius: f64) -> BinaryImage {
    BinaryImage::from_fn(h, w, |r, c| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        dy * dy + dx * dx <= radius * radius
    })
}

/// Union of a few random disks, used as a stand-in for segmentation masks.
fn random_blobs(seed: u64, size: usize) -> BinaryImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = BinaryImage::new(size, size);
    for _ in 0..rng.gen_range(1..4) {
        let r = rng.gen_range(2.0..size as f64 / 4.0);
        let cy = rng.gen_range(0.0..size as f64);
        let cx = rng.gen_range(0.0..size as f64);
        let d = disk(size, size, cy, cx, r);
        for (a, &b) in img.bits_mut().iter_mut().zip(d.bits()) {
            *a |= b;
        }
    }
    img
}

fn components(b: &BinaryImage) -> usize {
    trace_contours(b).len()
}

fn has_full_2x2(b: &BinaryImage) -> bool {
    (0..b.height().saturating_sub(1)).any(|r| {
        (0..b.width().saturating_sub(1))
            .any(|c| b.get(r, c) && b.get(r, c + 1) && b.get(r + 1, c) && b.get(r + 1, c + 1))
    })
}

fn point_set(c: &Contour) -> std::collections::BTreeSet<(usize, usize)> {
    c.points.iter().copied().collect()
}

#[test]
fn block_border_is_eight_pixels_and_closed() {
    let b = from_rows(&[".....", ".###.", ".###.", ".###.", "....."]);
    let cs = trace_contours(&b);
    assert_eq!(cs.len(), 1);
    let c = &cs[0];
    assert_eq!(c.len(), 8);
    assert!(c.closed);
    assert!(!c.points.contains(&(2, 2)));
    for pair in c.points.windows(2) {
        assert!(pair[0].0.abs_diff(pair[1].0) <= 1 && pair[0].1.abs_diff(pair[1].1) <= 1);
    }
}

#[test]
fn trace_empty_and_two_blobs() {
    assert!(trace_contours(&BinaryImage::new(6, 6)).is_empty());
    let b = from_rows(&["##....", "##....", "......", "...###", "...###"]);
    assert_eq!(trace_contours(&b).len(), 2);
}

#[test]
fn single_pixel_and_open_line_are_not_closed() {
    let b = from_rows(&["...", ".#.", "..."]);
    let cs = trace_contours(&b);
    assert_eq!(cs[0].points, vec![(1, 1)]);
    assert!(!cs[0].closed);
    let line = from_rows(&["..........", ".########.", ".........."]);
    let cs = trace_contours(&line);
    assert!(!cs[0].closed);
    assert_eq!(point_set(&cs[0]).len(), 8);
}

#[test]
fn longest_contour_ties_and_errors() {
    let mk = |n: usize, tag: usize| Contour { points: vec![(tag, 0); n], closed: false };
    let cs = vec![mk(4, 0), mk(9, 1), mk(9, 2)];
    assert_eq!(longest_contour(&cs).unwrap().points[0].0, 1);
    assert_eq!(longest_contour(&cs[..1]).unwrap(), &cs[0]);
    assert!(longest_contour(&[]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cs: Vec<Contour> = (0..50).map(|i| mk(rng.gen_range(1..30), i)).collect();
    let max = cs.iter().map(|c| c.len()).max().unwrap();
    let first = cs.iter().position(|c| c.len() == max).unwrap();
    assert_eq!(longest_contour(&cs).unwrap().points[0].0, first);
}

#[test]
fn rasterize_thickness() {
    let line = Contour { points: (3..13).map(|c| (5, c)).collect(), closed: false };
    let t1 = rasterize_contour(&line, 12, 16, 1).unwrap();
    assert_eq!(t1.count(), 10);
    assert!(line.points.iter().all(|&(r, c)| t1.get(r, c)));
    let t2 = rasterize_contour(&line, 12, 16, 2).unwrap();
    assert!(t1.is_subset_of(&t2));
    // Two rows; the 2x2 stamp overhangs the line end by one column.
    assert_eq!(t2.count(), 2 * 10 + 2);
    assert!((3..14).all(|c| t2.get(5, c) && t2.get(6, c)));
    let t3 = rasterize_contour(&line, 12, 16, 3).unwrap();
    assert!(t2.is_subset_of(&t3));

    assert!(rasterize_contour(&line, 12, 16, 0).is_err());
    assert!(rasterize_contour(&line, 5, 16, 1).is_err());
}

#[test]
fn trace_of_rasterized_loop_recovers_points() {
    for radius in [4.0, 7.5, 12.0] {
        let mask = disk(32, 32, 15.3, 16.1, radius);
        let cs = trace_contours(&mask);
        let ring = longest_contour(&cs).unwrap();
        assert!(ring.closed);
        let raster = rasterize_contour(ring, 32, 32, 1).unwrap();
        let again = trace_contours(&raster);
        assert_eq!(again.len(), 1);
        assert_eq!(point_set(&again[0]), point_set(ring));
        assert!(again[0].closed);
    }
}

fn gray(h: usize, w: usize, values: Vec<f64>) -> GrayImage {
    GrayImage::from_vec(h, w, values).unwrap()
}

/// Direct 2-D convolution with the outer-product kernel and reflect padding.
fn blur_oracle(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k1: Vec<f64> = (-r..=r).map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k1.iter().sum();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let refl = |i: isize, n: isize| {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut out = vec![0.0; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let kv = k1[(dy + r) as usize] * k1[(dx + r) as usize] / (s * s);
                    acc += kv * img.get(refl(y + dy, h), refl(x + dx, w));
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

#[test]
fn blur_preserves_constants_and_mass() {
    let c = gray(7, 5, vec![0.37; 35]);
    let b = gaussian_blur(&c, 1.3).unwrap();
    assert!(b.values().iter().all(|v| (v - 0.37).abs() < 1e-9));

    let mut imp = GrayImage::new(9, 9);
    imp.set(4, 4, 1.0);
    let b = gaussian_blur(&imp, 1.0).unwrap();
    assert!((b.values().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let oracle = blur_oracle(&imp, 1.0);
    assert!(b.values().iter().zip(&oracle).all(|(a, e)| (a - e).abs() < 1e-12));

    assert!(gaussian_blur(&c, 0.0).is_err());
    assert!(gaussian_blur(&c, -1.0).is_err());
}

#[test]
fn blur_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for sigma in [0.6, 1.0, 2.5, 6.0] {
        let img = gray(16, 16, (0..256).map(|_| rng.gen()).collect());
        let fast = gaussian_blur(&img, sigma).unwrap();
        let slow = blur_oracle(&img, sigma);
        for (a, e) in fast.values().iter().zip(&slow) {
            assert!((a - e).abs() < 1e-9, "sigma {sigma}: {a} vs {e}");
        }
    }
}

#[test]
fn skeleton_of_diagonal_is_unchanged() {
    let diag = BinaryImage::from_fn(10, 10, |r, c| r == c && r > 0 && r < 9);
    for m in [Thinning::ZhangSuen, Thinning::GuoHall] {
        assert_eq!(skeletonize(&diag, m), diag);
    }
}

#[test]
fn skeleton_of_bar_is_middle_row() {
    let bar = BinaryImage::from_fn(7, 14, |r, c| (2..5).contains(&r) && (2..12).contains(&c));
    for m in [Thinning::ZhangSuen, Thinning::GuoHall] {
        let s = skeletonize(&bar, m);
        assert!(s.on_pixels().into_iter().all(|(r, _)| r == 3), "{m:?}");
        // Plain parallel Zhang-Suen leaves columns 3..=9 here: one pixel
        // lost on the left, two on the right.
        assert!((3..10).all(|c| s.get(3, c)), "{m:?}");
        assert_eq!(skeletonize(&s, m), s);
    }
}

#[test]
fn skeleton_properties_on_blobs() {
    for seed in 0..60 {
        let b = random_blobs(seed, 40);
        for m in [Thinning::ZhangSuen, Thinning::GuoHall] {
            let s = skeletonize(&b, m);
            assert!(s.is_subset_of(&b), "seed {seed}");
            assert_eq!(skeletonize(&s, m), s, "seed {seed}");
            assert_eq!(components(&s), components(&b), "seed {seed}");
            assert!(!has_full_2x2(&s), "seed {seed} {m:?}");
        }
    }
}

#[test]
fn simple_point_cases() {
    // An end of a line and the middle of a line.
    let line = from_rows(&[".....", ".###.", "....."]);
    assert!(is_simple_point(&line, 1, 1));
    assert!(!is_simple_point(&line, 1, 2));
    // Interior pixel would open a hole.
    let block = from_rows(&["###", "###", "###"]);
    assert!(!is_simple_point(&block, 1, 1));
    assert!(is_simple_point(&block, 0, 0));
}

#[test]
fn closing_bridges_gap() {
    let b = from_rows(&[".........", ".###.###.", "........."]);
    let c = morph_close(&b, 1).unwrap();
    assert!(c.get(1, 4));
    assert!(b.is_subset_of(&c));
    assert_eq!(c.count(), 7);
    let empty = BinaryImage::new(5, 5);
    assert_eq!(morph_close(&empty, 2).unwrap(), empty);
    assert!(morph_close(&b, 0).is_err());
}

#[test]
fn closing_keeps_border_shapes() {
    let full = BinaryImage::from_fn(6, 6, |r, _| r < 3);
    assert_eq!(morph_close(&full, 2).unwrap(), full);
}

#[test]
fn truncation() {
    let ring = rasterize_contour(
        longest_contour(&trace_contours(&disk(20, 20, 10.0, 10.0, 6.0))).unwrap(),
        20,
        20,
        1,
    )
    .unwrap();
    let ones = BinaryImage::from_fn(20, 20, |_, _| true);
    assert_eq!(truncate_with_mask(&ring, &ones).unwrap(), ring);
    assert!(truncate_with_mask(&ring, &BinaryImage::new(20, 20)).unwrap().is_empty());
    let left = BinaryImage::from_fn(20, 20, |_, c| c < 10);
    let kept = truncate_with_mask(&ring, &left).unwrap();
    assert_eq!(kept.count(), ring.on_pixels().into_iter().filter(|&(_, c)| c < 10).count());
    assert!(truncate_with_mask(&ring, &BinaryImage::new(20, 21)).is_err());
}

#[test]
fn longest_closed_keeps_largest_loop() {
    // Square outlines: 4x4 (perimeter 12) and 11x11 (perimeter 40).
    let b = BinaryImage::from_fn(30, 30, |r, c| {
        let sq = |r0: usize, c0: usize, n: usize| {
            (r0..r0 + n).contains(&r)
                && (c0..c0 + n).contains(&c)
                && (r == r0 || r == r0 + n - 1 || c == c0 || c == c0 + n - 1)
        };
        sq(2, 2, 4) || sq(10, 12, 11)
    });
    let cs = trace_contours(&b);
    let mut lens: Vec<usize> = cs.iter().map(|c| c.len()).collect();
    lens.sort();
    assert_eq!(lens, vec![12, 40]);
    let sel = longest_closed_contour(&b);
    assert!(!sel.flagged);
    assert_eq!(sel.image.count(), 40);
    assert!(!sel.image.get(2, 2) && sel.image.get(10, 12));
}

#[test]
fn longest_closed_matches_ranking_oracle() {
    for seed in 0..20 {
        let b = skeletonize(&random_blobs(100 + seed, 48), Thinning::ZhangSuen);
        let cs = trace_contours(&b);
        let sel = longest_closed_contour(&b);
        let best = cs
            .iter()
            .filter(|c| c.closed)
            .fold(None::<&Contour>, |acc, c| match acc {
                Some(a) if a.len() >= c.len() => Some(a),
                _ => Some(c),
            });
        match best {
            Some(c) => {
                assert!(!sel.flagged);
                assert_eq!(sel.image, rasterize_contour(c, 48, 48, 1).unwrap());
            }
            None => assert!(sel.flagged),
        }
    }
}

#[test]
fn open_arc_is_flagged() {
    let arc = BinaryImage::from_fn(20, 20, |r, c| r == 5 && (3..15).contains(&c) || c == 14 && (5..12).contains(&r));
    let sel = longest_closed_contour(&arc);
    assert!(sel.flagged);
    assert_eq!(sel.image, arc);
    let empty = longest_closed_contour(&BinaryImage::new(4, 4));
    assert!(empty.flagged && empty.image.is_empty());
}

#[test]
fn postprocess_thins_a_thick_loop() {
    let mask = disk(40, 40, 19.5, 20.0, 12.0);
    let ring = longest_contour(&trace_contours(&mask)).unwrap().clone();
    let thin = rasterize_contour(&ring, 40, 40, 1).unwrap();
    let thick = rasterize_contour(&ring, 40, 40, 2).unwrap();
    let opts = PostprocessOptions { pick_longest_closed: true, ..Default::default() };
    let out = postprocess(&thick, &opts, None).unwrap();
    assert!(!out.flagged);
    // Every output pixel lies on or next to the original loop and vice versa.
    let near = |a: &BinaryImage, b: &BinaryImage| {
        a.on_pixels()
            .into_iter()
            .all(|(r, c)| (-1..=1).any(|dy| (-1..=1).any(|dx| b.get_signed(r as isize + dy, c as isize + dx))))
    };
    assert!(near(&out.contour, &thin) && near(&thin, &out.contour));
    let n = out.contour.count() as f64;
    assert!((n / thin.count() as f64 - 1.0).abs() < 0.15);
    assert!(!has_full_2x2(&out.contour));
}

#[test]
fn postprocess_empty_is_flagged() {
    let out = postprocess(&BinaryImage::new(16, 16), &PostprocessOptions::default(), None).unwrap();
    assert!(out.flagged && out.contour.is_empty());
}

#[test]
fn postprocess_stays_within_closure_bound() {
    for seed in 0..10 {
        let b = random_blobs(200 + seed, 32);
        let opts = PostprocessOptions::default();
        let out = postprocess(&b, &opts, None).unwrap();
        let bound = dilate(&dilate(&b, 1), opts.close_radius);
        assert!(out.contour.is_subset_of(&bound));
    }
}

#[test]
fn postprocess_gray_accepts_probability_maps() {
    let mask = disk(30, 30, 14.0, 15.0, 9.0);
    let ring = rasterize_contour(longest_contour(&trace_contours(&mask)).unwrap(), 30, 30, 2).unwrap();
    let soft = GrayImage::from_fn(30, 30, |r, c| if ring.get(r, c) { 0.9 } else { 0.05 });
    let a = postprocess_gray(&soft, &PostprocessOptions::default(), None).unwrap();
    let b = postprocess(&ring, &PostprocessOptions::default(), None).unwrap();
    assert!(!a.contour.is_empty());
    assert!(a.contour.count().abs_diff(b.contour.count()) <= b.contour.count() / 5);
}

fn arb_image(max: usize) -> impl Strategy<Value = BinaryImage> {
    (3..max, 3..max).prop_flat_map(|(h, w)| {
        proptest::collection::vec(proptest::bool::weighted(0.4), h * w)
            .prop_map(move |bits| BinaryImage::from_vec(h, w, bits).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closing_is_extensive_idempotent_and_monotone(x in arb_image(20), extra in any::<u64>(), r in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(extra);
        let y = BinaryImage::from_fn(x.height(), x.width(), |r, c| x.get(r, c) || rng.gen_bool(0.2));
        let cx = morph_close(&x, r).unwrap();
        prop_assert!(x.is_subset_of(&cx));
        prop_assert_eq!(morph_close(&cx, r).unwrap(), cx.clone());
        prop_assert!(cx.is_subset_of(&morph_close(&y, r).unwrap()));
    }

    #[test]
    fn skeleton_of_noise_is_a_thin_subset(x in arb_image(18)) {
        let s = skeletonize(&x, Thinning::ZhangSuen);
        prop_assert!(s.is_subset_of(&x));
        prop_assert_eq!(skeletonize(&s, Thinning::ZhangSuen), s.clone());
        prop_assert_eq!(components(&s), components(&x));
    }

    #[test]
    fn truncation_is_an_and(x in arb_image(12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (x.height(), x.width());
        let a = BinaryImage::from_fn(h, w, |_, _| rng.gen_bool(0.5));
        let b = BinaryImage::from_fn(h, w, |_, _| rng.gen_bool(0.5));
        let ab = truncate_with_mask(&truncate_with_mask(&x, &a).unwrap(), &b).unwrap();
        let ba = truncate_with_mask(&truncate_with_mask(&x, &b).unwrap(), &a).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert_eq!(truncate_with_mask(&ab, &b).unwrap(), ab.clone());
    }

    #[test]
    fn traced_chains_are_eight_connected(x in arb_image(16)) {
        for c in trace_contours(&x) {
            prop_assert!(!c.is_empty());
            for pair in c.points.windows(2) {
                prop_assert!(pair[0].0.abs_diff(pair[1].0) <= 1 && pair[0].1.abs_diff(pair[1].1) <= 1);
                prop_assert!(pair[0] != pair[1]);
            }
            if c.closed {
                let (a, b) = (c.points[0], c.points[c.len() - 1]);
                prop_assert!(a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1);
            }
        }
    }
}

