mod shared;

use dropvid::align::deform_conv_tensor;
use dropvid::flow::warp_tensor;
use dropvid::tensor::Tensor;
use dropvid::FlowField;
use proptest::prelude::*;
use shared::checks;
use shared::oracles::{random_frame, random_tensor, rng, warp_loop};

#[test]
fn zero_offset_deform_matches_dense_conv() {
    eprintln!("{}", checks::deform_zero_offset_oracle().unwrap());
}

#[test]
fn warp_matches_reference_cases() {
    eprintln!("{}", checks::warp_oracles().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_matches_scalar_loop(seed in any::<u64>(), h in 4usize..12, w in 4usize..12) {
        let mut r = rng(seed);
        let f = random_frame(&mut r, 3, h, w);
        let flow = FlowField::new(random_tensor(&mut r, &[2, h, w], -1.4, 1.4).cast(), 0, 1).unwrap();
        let got = warp_tensor(&f.to_batch(), &flow.vectors.clone().reshape(&[1, 2, h, w]).unwrap());
        let want = warp_loop(&f, &flow);
        for (a, b) in got.data().iter().zip(want) {
            prop_assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    // Samples are convex combinations of pixels, so the range is preserved.
    #[test]
    fn warp_stays_within_input_range(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = random_frame(&mut r, 1, 8, 9);
        let flow = random_tensor(&mut r, &[1, 2, 8, 9], -20.0, 20.0).cast::<f32>();
        let out = warp_tensor(&f.to_batch(), &flow);
        let lo = f.pixels.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = f.pixels.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
    }

    // An integer shift of every tap by (dx, dy) equals convolving a
    // correspondingly translated input away from the borders.
    #[test]
    fn uniform_integer_offsets_translate_the_response(seed in any::<u64>(), dy in -1i32..=1, dx in -1i32..=1) {
        let mut r = rng(seed);
        let (h, w) = (9, 9);
        let x = random_tensor(&mut r, &[1, 2, h, w], -1.0, 1.0);
        let k = random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
        let mut off = Tensor::zeros(&[1, 18, h, w]);
        for tap in 0..9 {
            for p in 0..h * w {
                off.data_mut()[2 * tap * h * w + p] = dx as f64;
                off.data_mut()[(2 * tap + 1) * h * w + p] = dy as f64;
            }
        }
        let shifted = deform_conv_tensor(&x, &off, &k, None);
        let plain = deform_conv_tensor(&x, &Tensor::zeros(&[1, 18, h, w]), &k, None);
        for o in 0..3 {
            for y in 2..h - 2 {
                for xx in 2..w - 2 {
                    let a = shifted.data()[(o * h + y) * w + xx];
                    let b = plain.data()[(o * h + (y as i32 + dy) as usize) * w + (xx as i32 + dx) as usize];
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
