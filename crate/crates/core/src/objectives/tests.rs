use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradient_check_many;

fn random_image(w: u32, h: u32, lo: f64, hi: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.gen_range(lo..hi)).collect();
    Image::new(w, h, data).unwrap()
}

fn checkerboard(w: u32, h: u32, invert: bool) -> Image {
    let mut data = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let on = ((x + y) % 2 == 0) != invert;
            data.extend([if on { 1.0 } else { 0.0 }; 3]);
        }
    }
    Image::new(w, h, data).unwrap()
}

/// Direct 2-D windowed SSIM with zero padding; channel maps averaged.
fn reference_ssim(a: &Image, b: &Image) -> f64 {
    let (w, h) = (a.width as i64, a.height as i64);
    let sigma = 1.5f64;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let at = |img: &Image, x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            img.data[3 * (y * w + x) as usize + c]
        }
    };
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11i64 {
                    for j in 0..11i64 {
                        let k = win[i as usize][j as usize] / total;
                        let p = at(a, x + j - 5, y + i - 5, c);
                        let q = at(b, x + j - 5, y + i - 5, c);
                        mx += k * p;
                        my += k * q;
                        xx += k * p * p;
                        yy += k * q * q;
                        xy += k * p * q;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    acc / (3 * w * h) as f64
}

fn eval_ldr_loss(pred: &Image, gt: &Image, lambda: f64, mode: LossMode) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(image_tensor(pred)).unwrap();
    let g = tape.constant(image_tensor(gt)).unwrap();
    let l = ldr_loss(&mut tape, p, g, Dims::of(pred), lambda, mode).unwrap();
    tape.value(l).data()[0]
}

fn eval_hdr_loss(pred: &Image, gt: &Image, norm: Normalization) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(image_tensor(pred)).unwrap();
    let g = tape.constant(image_tensor(gt)).unwrap();
    let l = hdr_loss(&mut tape, p, g, 5000.0, norm).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn gaussian_taps_are_normalized_and_symmetric() {
    let t = gaussian_taps(11, 1.5);
    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for i in 0..5 {
        assert_eq!(t[i], t[10 - i]);
    }
}

#[test]
fn ldr_loss_examples() {
    let gt = random_image(8, 6, 0.0, 0.9, 1);
    assert_eq!(eval_ldr_loss(&gt, &gt, 0.2, LossMode::L1Dssim), 0.0);
    let shifted = Image::new(8, 6, gt.data.iter().map(|v| v + 0.1).collect()).unwrap();
    assert!((eval_ldr_loss(&shifted, &gt, 0.0, LossMode::L1Dssim) - 0.1).abs() < 1e-12);
    assert_eq!(eval_ldr_loss(&gt, &gt, 0.2, LossMode::Mse), 0.0);
    let m = eval_ldr_loss(&shifted, &gt, 0.2, LossMode::Mse);
    assert!((m - 0.01).abs() < 1e-12);
}

#[test]
fn checkerboard_loss_matches_reference_ssim() {
    let a = checkerboard(12, 9, false);
    let b = checkerboard(12, 9, true);
    let s = reference_ssim(&a, &b);
    let want = 1.0 + 0.2 * (1.0 - s) / 2.0;
    let got = eval_ldr_loss(&a, &b, 0.2, LossMode::L1Dssim);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn ssim_matches_reference_on_noisy_pairs() {
    for (w, h, seed) in [(16, 16, 1), (13, 7, 2), (2, 2, 3), (32, 20, 4)] {
        let a = random_image(w, h, 0.0, 1.0, seed);
        let noise = random_image(w, h, -0.1, 0.1, seed + 100);
        let b = Image::new(w, h, a.data.iter().zip(&noise.data).map(|(x, n)| x + n).collect()).unwrap();
        let got = ssim(&a, &b).unwrap();
        let want = reference_ssim(&a, &b);
        assert!((got - want).abs() < 1e-9, "{w}x{h}: {got} vs {want}");
        assert!((-1.0..=1.0).contains(&got));
    }
    let a = random_image(9, 9, 0.0, 1.0, 7);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

#[test]
fn psnr_examples() {
    let gt = Image::filled(4, 4, 0.5);
    let pred = Image::filled(4, 4, 0.6);
    assert!((psnr(&pred, &gt, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&gt, &gt, 1.0).unwrap(), f64::INFINITY);
    assert!(psnr(&gt, &Image::filled(2, 2, 0.5), 1.0).is_err());
}

#[test]
fn tonemap_endpoints_and_midpoint() {
    let img = Image::new(3, 1, vec![0.0, 0.5, 1.0, 2.0, 4.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let (t, degenerate) = tonemap_image(&img, 5000.0).unwrap();
    assert!(!degenerate);
    assert_eq!(t.data[0], 0.0);
    assert_eq!(t.data[5], 0.0);
    assert_eq!(t.data[4], 1.0);
    // 0.5 and 1.0 normalize to 0.125 and 0.25 of the range [0, 4].
    let want = |n: f64| (1.0 + 5000.0 * n).ln() / 5001f64.ln();
    assert!((t.data[1] - want(0.125)).abs() < 1e-15);
    let (half, _) = tonemap_image(&Image::new(1, 1, vec![0.0, 0.5, 1.0]).unwrap(), 5000.0).unwrap();
    assert!((half.data[1] - 2501f64.ln() / 5001f64.ln()).abs() < 1e-15);
    assert!((half.data[1] - 0.9186).abs() < 5e-5);
    assert_eq!((half.data[0], half.data[2]), (0.0, 1.0));
}

#[test]
fn tonemap_small_mu_is_near_identity() {
    let img = random_image(5, 4, 0.0, 3.0, 5);
    let (t, _) = tonemap_image(&img, 1e-6).unwrap();
    let lo = img.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (o, v) in t.data.iter().zip(&img.data) {
        assert!((o - (v - lo) / (hi - lo)).abs() < 1e-6);
    }
}

#[test]
fn degenerate_tonemap_is_flagged() {
    let (t, degenerate) = tonemap_image(&Image::filled(3, 3, 2.5), 5000.0).unwrap();
    assert!(degenerate);
    assert!(t.data.iter().all(|&v| v == 0.0));
    assert!(tonemap_image(&Image::filled(1, 1, 1.0), 0.0).is_err());
}

#[test]
fn hdr_loss_examples() {
    let gt = random_image(6, 5, 0.01, 20.0, 3);
    let norm = Normalization::default();
    assert_eq!(eval_hdr_loss(&gt, &gt, norm), 0.0);
    let doubled = Image::new(6, 5, gt.data.iter().map(|v| 2.0 * v).collect()).unwrap();
    assert_eq!(eval_hdr_loss(&doubled, &gt, norm), 0.0);
    let shared = Normalization {
        shared: true,
        ..norm
    };
    assert!(eval_hdr_loss(&doubled, &gt, shared) > 1e-3);
    assert_eq!(eval_hdr_loss(&gt, &gt, shared), 0.0);
}

#[test]
fn hdr_loss_hand_example() {
    // Single-channel-like 2x2 images; normalization maps both to [0, 1].
    let gt = Image::new(2, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 4.0, 4.0, 4.0]).unwrap();
    let pred = Image::new(2, 2, vec![0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 4.0, 4.0, 4.0]).unwrap();
    let t = |n: f64| (1.0 + 5000.0 * n).ln() / 5001f64.ln();
    let want = 3.0 * (t(0.5) - t(0.25)).powi(2) / 12.0;
    let got = eval_hdr_loss(&pred, &gt, Normalization::default());
    assert!((got - want).abs() < 1e-15, "{got} vs {want}");
}

#[test]
fn h2l_loss_delegates_to_ldr_loss() {
    let a = random_image(7, 7, 0.0, 1.0, 8);
    let b = random_image(7, 7, 0.0, 1.0, 9);
    for mode in [LossMode::L1Dssim, LossMode::Mse] {
        let mut tape = Tape::new();
        let p = tape.constant(image_tensor(&a)).unwrap();
        let g = tape.constant(image_tensor(&b)).unwrap();
        let l = h2l_loss(&mut tape, p, g, Dims::of(&a), 0.2, mode).unwrap();
        assert_eq!(tape.value(l).data()[0], eval_ldr_loss(&a, &b, 0.2, mode));
        let same = h2l_loss(&mut tape, g, g, Dims::of(&a), 0.2, mode).unwrap();
        assert_eq!(tape.value(same).data()[0], 0.0);
    }
}

fn total_of(ldr: f64, hdr: Option<f64>, h2l: Option<f64>, w: &LossWeights) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let terms = LossTerms {
        ldr: Some(tape.scalar(ldr).unwrap()),
        hdr: hdr.map(|v| tape.scalar(v).unwrap()),
        h2l: h2l.map(|v| tape.scalar(v).unwrap()),
    };
    let t = total_loss(&mut tape, terms, w)?;
    Ok(tape.value(t).data()[0])
}

#[test]
fn total_loss_weighting() {
    let w = LossWeights::default();
    assert!((total_of(1.0, Some(1.0), Some(1.0), &w).unwrap() - 1.65).abs() < 1e-15);
    let zero = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        ..w
    };
    assert_eq!(total_of(0.37, Some(5.0), Some(9.0), &zero).unwrap(), 0.37);
    assert_eq!(total_of(0.37, None, None, &w).unwrap(), 0.37);
    let base = total_of(0.3, Some(0.2), Some(0.4), &w).unwrap();
    let scaled = total_of(0.3, Some(0.2 * 3.0), Some(0.4), &w).unwrap();
    assert!((scaled - base - 0.6 * 0.4).abs() < 1e-15);
    let scaled = total_of(0.3, Some(0.2), Some(0.4 * 2.0), &w).unwrap();
    assert!((scaled - base - 0.05 * 0.4).abs() < 1e-15);
    let bad = LossWeights { alpha: -0.1, ..w };
    assert!(matches!(
        total_of(1.0, None, None, &bad),
        Err(LossError::NegativeWeight { name: "alpha", .. })
    ));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let dims = Dims {
        width: 5,
        height: 4,
    };
    let gt = random_image(5, 4, 0.05, 0.95, 21);
    let pred = random_image(5, 4, 0.05, 0.95, 22);
    for mode in [LossMode::L1Dssim, LossMode::Mse] {
        let err = gradient_check_many(
            |tape, v| {
                let g = tape.constant(image_tensor(&gt))?;
                ldr_loss(tape, v[0], g, dims, 0.2, mode).map_err(|e| match e {
                    LossError::Diff(d) => d,
                    other => panic!("{other}"),
                })
            },
            &[image_tensor(&pred)],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{mode:?}: {err}");
    }

    let hgt = random_image(5, 4, 0.0, 30.0, 23);
    let hpred = random_image(5, 4, 0.0, 30.0, 24);
    for (stop_gradient, shared) in [(false, false), (true, true)] {
        let norm = Normalization { stop_gradient, shared };
        let err = gradient_check_many(
            |tape, v| {
                let g = tape.constant(image_tensor(&hgt))?;
                hdr_loss(tape, v[0], g, 5000.0, norm).map_err(|e| match e {
                    LossError::Diff(d) => d,
                    other => panic!("{other}"),
                })
            },
            &[image_tensor(&hpred)],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{norm:?}: {err}");
    }
}

/// With a stop-gradient on the normalizing range the finite-difference oracle
/// must hold the range fixed at the unperturbed image's min and max.
#[test]
fn stop_gradient_hdr_loss_matches_frozen_range_differences() {
    let gt = random_image(5, 4, 0.0, 100.0, 23);
    let pred = random_image(5, 4, 0.0, 100.0, 24);
    let lo = pred.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pred.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut tape = Tape::new();
    let p = tape.param(image_tensor(&pred)).unwrap();
    let g = tape.constant(image_tensor(&gt)).unwrap();
    let l = hdr_loss(&mut tape, p, g, 5000.0, Normalization::default()).unwrap();
    let analytic = tape.backward(l).unwrap().get_or_zeros(p);

    let frozen = |data: &[f64]| {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(20, 3, data.to_vec()).unwrap()).unwrap();
        let g = tape.constant(image_tensor(&gt)).unwrap();
        let (vlo, vhi) = (tape.scalar(lo).unwrap(), tape.scalar(hi).unwrap());
        let tp = mulaw_between(&mut tape, p, vlo, vhi, 5000.0, false).unwrap();
        let tg = mulaw_tonemap(&mut tape, g, 5000.0, true, None).unwrap();
        let m = mse_var(&mut tape, tp.var, tg.var).unwrap();
        tape.value(m).data()[0]
    };
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut x = pred.data.clone();
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let fp = frozen(&x);
        x[i] = x0 - h;
        let fm = frozen(&x);
        x[i] = x0;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / (fd.abs() + 1e-8));
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn stop_gradient_changes_only_the_extrema() {
    let gt = random_image(4, 4, 0.0, 10.0, 31);
    let pred = random_image(4, 4, 0.0, 10.0, 32);
    let grad = |stop_gradient| {
        let mut tape = Tape::new();
        let p = tape.param(image_tensor(&pred)).unwrap();
        let g = tape.constant(image_tensor(&gt)).unwrap();
        let norm = Normalization {
            stop_gradient,
            shared: false,
        };
        let l = hdr_loss(&mut tape, p, g, 5000.0, norm).unwrap();
        tape.backward(l).unwrap().get_or_zeros(p)
    };
    let (a, b) = (grad(true), grad(false));
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    assert!((1..=2).contains(&differing), "{differing}");
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[4, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[6, 3])).unwrap();
    let dims = Dims {
        width: 2,
        height: 2,
    };
    assert!(matches!(
        ldr_loss(&mut tape, a, b, dims, 0.2, LossMode::L1Dssim),
        Err(LossError::Shape(_))
    ));
    assert!(hdr_loss(&mut tape, a, b, 5000.0, Normalization::default()).is_err());
}

proptest! {
    #[test]
    fn losses_are_nonnegative(seed in any::<u64>()) {
        let a = random_image(6, 5, 0.0, 1.0, seed);
        let b = random_image(6, 5, 0.0, 1.0, seed ^ 1);
        prop_assert!(eval_ldr_loss(&a, &b, 0.2, LossMode::L1Dssim) > 0.0);
        prop_assert!(eval_ldr_loss(&a, &b, 0.2, LossMode::Mse) > 0.0);
        prop_assert!(eval_hdr_loss(&a, &b, Normalization::default()) > 0.0);
    }

    #[test]
    fn tonemap_is_strictly_monotone(seed in any::<u64>(), mu in 0.5f64..1e4) {
        let img = random_image(8, 1, 0.0, 50.0, seed);
        let (t, _) = tonemap_image(&img, mu).unwrap();
        for i in 0..img.data.len() {
            for j in 0..img.data.len() {
                if img.data[i] < img.data[j] {
                    prop_assert!(t.data[i] < t.data[j]);
                }
            }
        }
        prop_assert!(t.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
