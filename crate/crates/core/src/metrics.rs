//! Windowed SSIM (with its gradient) and masked image metrics.
//!
//! Images are row-major `H × W × 3` in `[0, 1]`.

use thiserror::Error;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{what} has {got} values, expected {expected}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("every pixel is excluded")]
    EmptyMask,
}

pub(crate) fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), MetricsError> {
    if got != expected {
        return Err(MetricsError::Shape { what, expected, got });
    }
    Ok(())
}

fn kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter of one plane with zero padding. The kernel is
/// symmetric, so this is also its own adjoint.
fn filter(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = kernel();
    let r = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(img: &[f64], c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(3).copied().collect()
}

struct Moments {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], w: usize, h: usize) -> Moments {
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    Moments {
        mu_x: filter(x, w, h),
        mu_y: filter(y, w, h),
        exx: filter(&prod(x, x), w, h),
        eyy: filter(&prod(y, y), w, h),
        exy: filter(&prod(x, y), w, h),
    }
}

struct SsimTerms {
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
}

fn terms(m: &Moments, i: usize) -> SsimTerms {
    let (mx, my) = (m.mu_x[i], m.mu_y[i]);
    SsimTerms {
        a1: 2.0 * mx * my + SSIM_C1,
        a2: 2.0 * (m.exy[i] - mx * my) + SSIM_C2,
        b1: mx * mx + my * my + SSIM_C1,
        b2: (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + SSIM_C2,
    }
}

/// Per-pixel, per-channel SSIM map (`H × W × 3`).
pub fn ssim_map(x: &[f64], y: &[f64], width: usize, height: usize) -> Result<Vec<f64>, MetricsError> {
    let n = width * height * 3;
    check_len("image", x.len(), n)?;
    check_len("reference", y.len(), n)?;
    let mut out = vec![0.0; n];
    for c in 0..3 {
        let m = moments(&plane(x, c), &plane(y, c), width, height);
        for i in 0..width * height {
            let t = terms(&m, i);
            out[i * 3 + c] = t.a1 * t.a2 / (t.b1 * t.b2);
        }
    }
    Ok(out)
}

/// Gradient of `Σ d_map · ssim_map(x, y)` with respect to `x`.
pub fn ssim_map_backward(
    x: &[f64],
    y: &[f64],
    width: usize,
    height: usize,
    d_map: &[f64],
) -> Result<Vec<f64>, MetricsError> {
    let n = width * height * 3;
    check_len("image", x.len(), n)?;
    check_len("reference", y.len(), n)?;
    check_len("map gradient", d_map.len(), n)?;
    let mut d_x = vec![0.0; n];
    let np = width * height;
    for c in 0..3 {
        let xp = plane(x, c);
        let yp = plane(y, c);
        let m = moments(&xp, &yp, width, height);
        let mut g_mu = vec![0.0; np];
        let mut g_xx = vec![0.0; np];
        let mut g_xy = vec![0.0; np];
        for i in 0..np {
            let up = d_map[i * 3 + c];
            if up == 0.0 {
                continue;
            }
            let t = terms(&m, i);
            let s = t.a1 * t.a2 / (t.b1 * t.b2);
            let d_a1 = t.a2 / (t.b1 * t.b2);
            let d_a2 = t.a1 / (t.b1 * t.b2);
            let d_b1 = -s / t.b1;
            let d_b2 = -s / t.b2;
            let (mx, my) = (m.mu_x[i], m.mu_y[i]);
            g_mu[i] = up * (2.0 * my * (d_a1 - d_a2) + 2.0 * mx * (d_b1 - d_b2));
            g_xx[i] = up * d_b2;
            g_xy[i] = up * 2.0 * d_a2;
        }
        let f_mu = filter(&g_mu, width, height);
        let f_xx = filter(&g_xx, width, height);
        let f_xy = filter(&g_xy, width, height);
        for i in 0..np {
            d_x[i * 3 + c] = f_mu[i] + 2.0 * xp[i] * f_xx[i] + yp[i] * f_xy[i];
        }
    }
    Ok(d_x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Metrics over pixels where `excluded` is false. SSIM is computed on the
/// full images and averaged over the included window centers.
pub fn masked_metrics(
    render: &[f64],
    reference: &[f64],
    width: usize,
    height: usize,
    excluded: &[bool],
) -> Result<MetricsReport, MetricsError> {
    check_len("exclusion mask", excluded.len(), width * height)?;
    let map = ssim_map(render, reference, width, height)?;
    let mut count = 0usize;
    let (mut se, mut ae, mut ss) = (0.0, 0.0, 0.0);
    for (p, _) in excluded.iter().enumerate().filter(|(_, e)| !**e) {
        count += 1;
        for c in 0..3 {
            let d = render[p * 3 + c] - reference[p * 3 + c];
            se += d * d;
            ae += d.abs();
            ss += map[p * 3 + c];
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let n = (count * 3) as f64;
    let mse = se / n;
    Ok(MetricsReport { psnr: psnr_from_mse(mse), ssim: ss / n, mse, mae: ae / n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(k[i], k[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn filter_is_self_adjoint() {
        let (w, h) = (9, 7);
        let a: Vec<f64> = (0..w * h).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let b: Vec<f64> = (0..w * h).map(|i| ((i * 13 % 7) as f64).cos()).collect();
        let lhs: f64 = filter(&a, w, h).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(filter(&b, w, h)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
