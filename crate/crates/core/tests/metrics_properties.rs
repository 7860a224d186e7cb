mod common;

use proptest::prelude::*;
use rand::Rng;
use splatlight::metrics::{masked_metrics, ssim_map, ssim_map_backward, MetricsError, PSNR_CAP};

#[test]
fn identical_images() {
    let mut rng = common::rng(1);
    let img = common::random_image(12, 10, &mut rng);
    let m = masked_metrics(&img, &img, 12, 10, &[false; 120]).unwrap();
    assert_eq!(m.mse, 0.0);
    assert_eq!(m.mae, 0.0);
    assert_eq!(m.psnr, PSNR_CAP);
    assert!((m.ssim - 1.0).abs() < 1e-12);
}

#[test]
fn constant_offset() {
    let a = vec![0.4; 16 * 16 * 3];
    let b = vec![0.5; 16 * 16 * 3];
    let m = masked_metrics(&a, &b, 16, 16, &[false; 256]).unwrap();
    assert!((m.mse - 0.01).abs() < 1e-12);
    assert!((m.mae - 0.1).abs() < 1e-12);
    assert!((m.psnr - 20.0).abs() < 1e-9);
}

#[test]
fn all_excluded_is_an_error() {
    let a = vec![0.4; 8 * 8 * 3];
    assert_eq!(masked_metrics(&a, &a, 8, 8, &[true; 64]), Err(MetricsError::EmptyMask));
}

#[test]
fn matches_reference_implementation() {
    let mut rng = common::rng(2);
    let (w, h) = (23, 17);
    let a = common::random_image(w, h, &mut rng);
    let b: Vec<f64> = a.iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
    let excluded: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.3)).collect();
    let m = masked_metrics(&a, &b, w, h, &excluded).unwrap();
    let reference = common::ssim_reference(&a, &b, w, h);
    let (mut se, mut ae, mut ss, mut n) = (0.0, 0.0, 0.0, 0.0);
    for p in (0..w * h).filter(|p| !excluded[*p]) {
        for c in 0..3 {
            let d = a[p * 3 + c] - b[p * 3 + c];
            se += d * d;
            ae += d.abs();
            ss += reference[p * 3 + c];
            n += 1.0;
        }
    }
    assert!((m.mse - se / n).abs() < 1e-6);
    assert!((m.mae - ae / n).abs() < 1e-6);
    assert!((m.psnr + 10.0 * (se / n).log10()).abs() < 1e-6);
    assert!((m.ssim - ss / n).abs() < 1e-4);
    let map = ssim_map(&a, &b, w, h).unwrap();
    for (x, y) in map.iter().zip(&reference) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let mut rng = common::rng(3);
    let (w, h) = (9, 8);
    let a = common::random_image(w, h, &mut rng);
    let b = common::random_image(w, h, &mut rng);
    let probe = common::random_image(w, h, &mut rng);
    let f = |x: &[f64]| ssim_map(x, &b, w, h).unwrap().iter().zip(&probe).map(|(s, p)| s * p).sum::<f64>();
    let g = ssim_map_backward(&a, &b, w, h, &probe).unwrap();
    for i in (0..a.len()).step_by(5) {
        let eval = |v: f64| {
            let mut x = a.clone();
            x[i] = v;
            f(&x)
        };
        common::assert_grad_close(g[i], common::central_difference(eval, a[i], 1e-5), 1e-5, 1e-9, "ssim");
    }
}

#[test]
fn metrics_are_deterministic() {
    let mut rng = common::rng(4);
    let a = common::random_image(10, 10, &mut rng);
    let b = common::random_image(10, 10, &mut rng);
    assert_eq!(masked_metrics(&a, &b, 10, 10, &[false; 100]), masked_metrics(&a, &b, 10, 10, &[false; 100]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_bounded(seed in 0u64..1000) {
        let mut rng = common::rng(seed);
        let a = common::random_image(12, 12, &mut rng);
        let b = common::random_image(12, 12, &mut rng);
        let m = masked_metrics(&a, &b, 12, 12, &[false; 144]).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m.ssim));
        prop_assert!(m.mse >= 0.0 && m.mae >= 0.0);
    }

    /// Growing the exclusion mask leaves per-pixel contributions untouched:
    /// the sums over the smaller included set are recovered exactly.
    #[test]
    fn mask_monotonicity(seed in 0u64..1000) {
        let mut rng = common::rng(seed);
        let (w, h) = (10, 9);
        let a = common::random_image(w, h, &mut rng);
        let b = common::random_image(w, h, &mut rng);
        let small: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.2)).collect();
        let large: Vec<bool> = small.iter().map(|e| *e || rng.random_bool(0.3)).collect();
        prop_assume!(large.iter().any(|e| !e));
        let ml = masked_metrics(&a, &b, w, h, &large).unwrap();
        let map = ssim_map(&a, &b, w, h).unwrap();
        let kept: Vec<usize> = (0..w * h).filter(|p| !large[*p]).collect();
        let n = (kept.len() * 3) as f64;
        let se: f64 = kept.iter().flat_map(|p| (0..3).map(move |c| p * 3 + c)).map(|i| (a[i] - b[i]).powi(2)).sum();
        let ss: f64 = kept.iter().flat_map(|p| (0..3).map(move |c| p * 3 + c)).map(|i| map[i]).sum();
        prop_assert!((ml.mse - se / n).abs() < 1e-12);
        prop_assert!((ml.ssim - ss / n).abs() < 1e-12);
    }
}
