//! JPEG round trip checked against outputs of libjpeg (4:4:4) frozen as
//! fixtures, plus property tests over the media invariants.

use std::path::Path;

use proptest::prelude::*;
use vidnet::media::{add_gaussian_noise, compute_ela, gaussian_noise_field, jpeg_roundtrip, resize_frame, Frame};

fn fixture(name: &str) -> Frame {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    Frame::load_png(&p).unwrap()
}

#[test]
fn matches_reference_codec() {
    let src = fixture("pattern32.png");
    for q in [50u8, 90] {
        let want = fixture(&format!("pattern32_libjpeg_q{q}.png"));
        let got = jpeg_roundtrip(&src, q).unwrap();
        let diffs: Vec<u8> = got
            .pixels()
            .iter()
            .zip(want.pixels())
            .map(|(a, b)| a.abs_diff(*b))
            .collect();
        let mad = diffs.iter().map(|&d| d as f64).sum::<f64>() / diffs.len() as f64;
        // libjpeg's integer DCT rounds differently from the float transform;
        // on this tie-heavy pattern an occasional coefficient lands one
        // quantization step away, so only the mean deviation is bounded.
        let limit = if q == 50 { 2.0 } else { 1.0 };
        assert!(mad < limit, "q{q}: mad {mad}");
        let ela_ours = vidnet::media::compute_ela(&src, q).unwrap().mean();
        let ela_ref = src
            .pixels()
            .iter()
            .zip(want.pixels())
            .map(|(a, b)| a.abs_diff(*b) as f64)
            .sum::<f64>()
            / diffs.len() as f64;
        assert!(
            (ela_ours - ela_ref).abs() / ela_ref < 0.1,
            "ELA {ela_ours} vs {ela_ref}"
        );
    }
}

fn frame_strategy() -> impl Strategy<Value = Frame> {
    (16u32..40, 16u32..40).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<u8>(), (h * w * 3) as usize)
            .prop_map(move |raw| Frame::from_raw(h, w, raw).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ela_zero_means_fixed_point(f in frame_strategy(), q in 1u8..=100) {
        let ela = compute_ela(&f, q).unwrap();
        prop_assert_eq!(ela.is_zero(), jpeg_roundtrip(&f, q).unwrap() == f);
    }

    #[test]
    fn lower_snr_means_more_noise(f in frame_strategy(), seed in any::<u64>(), a in 0.0f64..40.0, gap in 0.5f64..20.0) {
        prop_assume!(f.pixels().iter().any(|&v| v > 0));
        let power = |snr: f64| {
            let n = gaussian_noise_field(&f, snr, seed).unwrap();
            n.iter().map(|v| v * v).sum::<f64>()
        };
        prop_assert!(power(a) > power(a + gap));
    }

    #[test]
    fn noise_is_deterministic(f in frame_strategy(), seed in any::<u64>()) {
        prop_assert_eq!(add_gaussian_noise(&f, 25.0, seed).unwrap(), add_gaussian_noise(&f, 25.0, seed).unwrap());
    }
}

#[test]
fn resize_round_trip_on_ramp() {
    let (h, w) = (64u32, 96u32);
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([
            (x * 255 / (w - 1)) as u8,
            (y * 255 / (h - 1)) as u8,
            ((x + y) * 255 / (w + h - 2)) as u8,
        ])
    });
    let f = Frame::new(img).unwrap();
    let down = resize_frame(&f, 40, 52).unwrap();
    let back = resize_frame(&down, h, w).unwrap();
    let max = f
        .pixels()
        .iter()
        .zip(back.pixels())
        .map(|(a, b)| a.abs_diff(*b))
        .max()
        .unwrap();
    assert!(max <= 8, "max round-trip error {max}");
}

#[test]
fn resize_to_working_resolution() {
    let f = Frame::filled(480, 854, [10, 20, 30]).unwrap();
    let r = resize_frame(&f, 240, 427).unwrap();
    assert_eq!((r.height(), r.width()), (240, 427));
    let s = resize_frame(&r, 64, 112).unwrap();
    assert_eq!((s.height(), s.width()), (64, 112));
}

#[test]
fn measured_snr_near_target() {
    // Textured 240×427 frame; SNR measured on the pre-clamp noise field.
    let img = image::RgbImage::from_fn(427, 240, |x, y| {
        let v = |k: f64| (128.0 + 90.0 * ((x as f64 * k).sin() * (y as f64 * 0.07).cos())) as u8;
        image::Rgb([v(0.05), v(0.11), v(0.023)])
    });
    let f = Frame::new(img).unwrap();
    let noise = gaussian_noise_field(&f, 20.0, 42).unwrap();
    let p_noise = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let snr = 10.0 * (vidnet::media::signal_power(&f) / p_noise).log10();
    assert!((snr - 20.0).abs() <= 0.5, "measured {snr} dB");
}
