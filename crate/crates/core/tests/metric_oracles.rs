mod shared;

use dropvid::metrics::{psnr, psnr_from_mse, ssim, temporal_warp_error};
use dropvid::types::MaskMode;
use dropvid::{FlowField, Frame, RaindropMask, VideoClip};
use proptest::prelude::*;
use shared::checks;
use shared::oracles::{random_frame, random_tensor, rng, smooth_frame, twe_loop};

#[test]
fn metrics_match_references() {
    eprintln!("{}", checks::metric_oracles().unwrap());
}

#[test]
fn inverted_image_has_low_ssim() {
    let a = smooth_frame(32, 32, 0.0);
    let mut b = a.clone();
    b.pixels.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    assert!(ssim(&a, &b).unwrap() < 0.5);
}

#[test]
fn mse_of_a_hundredth_is_twenty_db() {
    assert_eq!(psnr_from_mse(0.01), 20.0);
    assert_eq!(psnr_from_mse(0.0), f64::INFINITY);
}

fn noisy(base: &Frame, amp: f32, seed: u64) -> Frame {
    let noise = random_frame(&mut rng(seed), base.channels(), base.height(), base.width());
    let mut f = base.clone();
    for (v, n) in f.pixels.data_mut().iter_mut().zip(noise.pixels.data()) {
        *v += amp * (n - 0.5);
    }
    f
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_decreases_with_noise(seed in any::<u64>(), a in 0.01f32..0.5, b in 0.01f32..0.5) {
        prop_assume!((a - b).abs() > 1e-3);
        let base = smooth_frame(16, 16, 0.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(psnr(&base, &noisy(&base, lo, seed)).unwrap() > psnr(&base, &noisy(&base, hi, seed)).unwrap());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_frame(&mut r, 3, 14, 15);
        let b = random_frame(&mut r, 3, 14, 15);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn temporal_warp_error_matches_loop(seed in any::<u64>(), n in 2usize..5) {
        let mut r = rng(seed);
        let (h, w) = (9, 10);
        let frames: Vec<Frame> = (0..n)
            .map(|t| Frame { time_index: t as i64, ..random_frame(&mut r, 3, h, w) })
            .collect();
        let flows: Vec<FlowField> = (0..n - 1)
            .map(|k| FlowField::new(random_tensor(&mut r, &[2, h, w], -2.0, 2.0).cast(), k as i64 + 1, k as i64).unwrap())
            .collect();
        let masks: Vec<RaindropMask> = (0..n - 1)
            .map(|_| RaindropMask::from_evidence(random_tensor(&mut r, &[1, h, w], 0.0, 0.1).cast(), 0.05, MaskMode::Hard))
            .collect();
        let clip = VideoClip::new(frames.clone(), 0).unwrap();
        let got = temporal_warp_error(&clip, &flows, &masks).unwrap();
        let want = twe_loop(&frames, &flows, &masks);
        prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-9), "{got} vs {want}");
    }
}
