use covct_core::preprocess::{crop_body, depth_resize, resize_bilinear, split_lungs, Flip, FlipSpec};
use covct_core::{Image, Volume};
use proptest::prelude::*;

/// Direct tent-filter evaluation: each output pixel is the sum over every
/// input pixel weighted by `max(0, 1 - |dx|) * max(0, 1 - |dy|)` at the
/// clamped half-pixel source position.
fn bilinear_oracle(img: &Image, out_w: usize, out_h: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::new();
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let mut acc = 0.0;
            for r in 0..h {
                for c in 0..w {
                    let wx = (1.0 - (sx - c as f64).abs()).max(0.0);
                    let wy = (1.0 - (sy - r as f64).abs()).max(0.0);
                    acc += wx * wy * f64::from(img.get(r, c));
                }
            }
            out.push(acc);
        }
    }
    out
}

#[test]
fn two_by_two_gradient_matches_oracle() {
    let img = Image::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let wide = resize_bilinear(&img, 4, 2).unwrap();
    let expect = [0.0, 0.25, 0.75, 1.0];
    for r in 0..2 {
        for (c, want) in expect.iter().enumerate() {
            assert!((f64::from(wide.get(r, c)) - want).abs() < 1e-9);
        }
    }
    for (w, h) in [(4, 2), (2, 4), (3, 5)] {
        let got = resize_bilinear(&img, w, h).unwrap();
        let want = bilinear_oracle(&img, w, h);
        for (g, o) in got.data().iter().zip(&want) {
            assert!((f64::from(*g) - o).abs() < 1e-7, "{w}x{h}: {g} vs {o}");
        }
    }
    // tall target keeps every row equal to [0, 1]
    let tall = resize_bilinear(&img, 2, 4).unwrap();
    assert!((0..4).all(|r| tall.get(r, 0) == 0.0 && tall.get(r, 1) == 1.0));
}

fn arb_image(max: usize) -> impl Strategy<Value = Image> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f32..=1.0, w * h).prop_map(move |d| Image::new(w, h, d).unwrap())
    })
}

proptest! {
    #[test]
    fn resize_matches_oracle_and_range(img in arb_image(7), w in 1usize..12, h in 1usize..12) {
        let got = resize_bilinear(&img, w, h).unwrap();
        let want = bilinear_oracle(&img, w, h);
        for (g, o) in got.data().iter().zip(&want) {
            // f32 storage limits agreement to single precision
            prop_assert!((f64::from(*g) - o).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(g));
        }
    }

    #[test]
    fn resize_constant_is_exact(v in 0.0f32..=1.0, w in 1usize..20, h in 1usize..20, ow in 1usize..30, oh in 1usize..30) {
        let img = Image::filled(w, h, v).unwrap();
        let out = resize_bilinear(&img, ow, oh).unwrap();
        prop_assert!(out.data().iter().all(|&x| x == v));
    }

    #[test]
    fn crop_is_idempotent(img in arb_image(12), t in 0.05f32..0.95) {
        if let Ok((cropped, _)) = crop_body(&img, t) {
            let (again, bbox) = crop_body(&cropped, t).unwrap();
            prop_assert_eq!(bbox.row_min, 0);
            prop_assert_eq!(bbox.col_min, 0);
            prop_assert_eq!((bbox.width(), bbox.height()), (cropped.width(), cropped.height()));
            prop_assert_eq!(again, cropped);
        }
    }

    #[test]
    fn split_partitions_columns(img in arb_image(16)) {
        prop_assume!(img.width() >= 2);
        let (l, r) = split_lungs(&img).unwrap();
        prop_assert_eq!(l.width() + r.width(), img.width());
        prop_assert_eq!(l.width(), img.width() / 2);
        for row in 0..img.height() {
            let mut joined = l.row(row).to_vec();
            joined.extend_from_slice(r.row(row));
            prop_assert_eq!(joined.as_slice(), img.row(row));
        }
    }

    #[test]
    fn depth_resize_is_monotone_and_covers_prefix(n in 1usize..300, target in 1usize..300) {
        let src: Vec<usize> = (0..n).collect();
        let out = depth_resize(&src, target).unwrap();
        prop_assert_eq!(out.len(), target);
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        if target >= n {
            let distinct: std::collections::BTreeSet<_> = out.iter().copied().collect();
            prop_assert_eq!(distinct.into_iter().collect::<Vec<_>>(), src);
        }
    }

    #[test]
    fn flips_form_z2_cubed(img in arb_image(6), depth in 1usize..5, a in 0usize..8, b in 0usize..8) {
        let all = FlipSpec::all();
        let (fa, fb) = (all[a], all[b]);
        let slices: Vec<Image> = (0..depth).map(|i| {
            Image::from_fn(img.width(), img.height(), |r, c| {
                (img.get(r, c) + i as f32 * 0.1).min(1.0)
            }).unwrap()
        }).collect();
        let vol = Volume::new("p", slices, None).unwrap();
        // involution, commutativity, closure under composition
        prop_assert_eq!(vol.flip(fa).flip(fa), vol.clone());
        prop_assert_eq!(vol.flip(fa).flip(fb), vol.flip(fb).flip(fa));
        prop_assert_eq!(vol.flip(fa).flip(fb), vol.flip(fa.compose(fb)));
        prop_assert_eq!(img.flip(FlipSpec::new(true, true, false)),
            img.flip(FlipSpec::new(true, false, false)).flip(FlipSpec::new(false, true, false)));
    }
}
