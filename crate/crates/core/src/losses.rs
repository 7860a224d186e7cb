//! Training objectives and their gradients with respect to render outputs.
//!
//! Images are row-major `H × W × 3`; masks are `H × W` with `true` meaning
//! "sky" for sky masks and "excluded" for exclusion masks.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::normalize_backward;
use crate::metrics::{check_len, ssim_map, ssim_map_backward, MetricsError};
use crate::raster::{BlendRecord, Camera};
use crate::sh::{basis, eval_with_basis, ShCoefficients};

/// Pixels need at least this accumulated alpha (and so do their four
/// neighbours) to get a reference normal.
pub const NORMAL_COVERAGE: f64 = 0.5;
/// A Gaussian counts as visible when its unmasked blend weights sum above this.
pub const VISIBILITY_WEIGHT: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] MetricsError),
    #[error("loss term {0} is not finite")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Share of L1 in the reconstruction loss; the rest is D-SSIM.
    pub rec_l1: f64,
    pub light: f64,
    pub normal: f64,
    pub scale: f64,
    pub fg_sky: f64,
    pub sky_depth: f64,
    pub gamma_sky_depth: f64,
    pub light_samples: usize,
    /// Iterations before which only the fg/sky separation term is active.
    pub warmup_iterations: usize,
    /// First iteration at which the normal and scale terms are active.
    pub regularizer_start: usize,
    /// Use the printed mask placement for the fg/sky term instead of
    /// penalizing foreground color on sky pixels.
    pub literal_fg_sky_masks: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec_l1: 0.8,
            light: 1.0,
            normal: 0.05,
            scale: 1.0,
            fg_sky: 0.5,
            sky_depth: 0.005,
            gamma_sky_depth: 0.02,
            light_samples: 256,
            warmup_iterations: 500,
            regularizer_start: 2000,
            literal_fg_sky_masks: false,
        }
    }
}

/// One value per loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub light: f64,
    pub normal: f64,
    pub scale: f64,
    pub fg_sky: f64,
    pub sky_depth: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 6] = ["rec", "light", "normal", "scale", "fg_sky", "sky_depth"];

    pub fn values(&self) -> [f64; 6] {
        [self.rec, self.light, self.normal, self.scale, self.fg_sky, self.sky_depth]
    }

    /// Weighted sum with compensated accumulation in [`Self::NAMES`] order.
    pub fn dot(&self, w: &LossTerms) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for (a, b) in self.values().iter().zip(w.values()) {
            let x = a * b;
            let t = sum + x;
            comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
            sum = t;
        }
        sum + comp
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.values().iter().zip(Self::NAMES).find(|(v, _)| !v.is_finite()).map(|(_, n)| n)
    }
}

impl LossWeights {
    /// Effective multiplier of every term at `iteration` (0 when inactive).
    pub fn multipliers(&self, iteration: usize) -> LossTerms {
        let mut m = LossTerms { fg_sky: self.fg_sky, ..Default::default() };
        if iteration < self.warmup_iterations {
            return m;
        }
        m.rec = 1.0;
        m.light = self.light;
        m.sky_depth = self.sky_depth;
        if iteration >= self.regularizer_start {
            m.normal = self.normal;
            m.scale = self.scale;
        }
        m
    }
}

/// Weighted total at `iteration` and the weighted per-term breakdown.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, iteration: usize) -> (f64, LossTerms) {
    let m = weights.multipliers(iteration);
    let weighted = LossTerms {
        rec: terms.rec * m.rec,
        light: terms.light * m.light,
        normal: terms.normal * m.normal,
        scale: terms.scale * m.scale,
        fg_sky: terms.fg_sky * m.fg_sky,
        sky_depth: terms.sky_depth * m.sky_depth,
    };
    (terms.dot(&m), weighted)
}

/// A scalar loss and its gradient with respect to one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn included_count(excluded: &[bool]) -> usize {
    excluded.iter().filter(|e| !**e).count()
}

/// `λ·L1 + (1−λ)·(1 − SSIM)/2` over non-excluded pixels. Excluded pixels
/// are zeroed in both images before windowing. A fully excluded image
/// yields 0 with a zero gradient.
pub fn loss_rec(
    render: &[f64],
    reference: &[f64],
    width: usize,
    height: usize,
    excluded: &[bool],
    lambda: f64,
) -> Result<ValueGrad, LossError> {
    let n_px = width * height;
    check_len("render", render.len(), n_px * 3)?;
    check_len("reference", reference.len(), n_px * 3)?;
    check_len("exclusion mask", excluded.len(), n_px)?;
    let count = included_count(excluded);
    let mut grad = vec![0.0; n_px * 3];
    if count == 0 {
        return Ok(ValueGrad { value: 0.0, grad });
    }
    let n = (count * 3) as f64;
    let mask = |img: &[f64]| -> Vec<f64> {
        img.iter().enumerate().map(|(i, v)| if excluded[i / 3] { 0.0 } else { *v }).collect()
    };
    let x = mask(render);
    let y = mask(reference);
    let mut l1 = 0.0;
    for i in 0..n_px * 3 {
        if excluded[i / 3] {
            continue;
        }
        let d = x[i] - y[i];
        l1 += d.abs();
        grad[i] += lambda * d.signum() / n * f64::from(d != 0.0);
    }
    l1 /= n;
    let map = ssim_map(&x, &y, width, height)?;
    let mut ssim = 0.0;
    let mut d_map = vec![0.0; n_px * 3];
    for i in 0..n_px * 3 {
        if !excluded[i / 3] {
            ssim += map[i];
            d_map[i] = -(1.0 - lambda) * 0.5 / n;
        }
    }
    ssim /= n;
    let d_x = ssim_map_backward(&x, &y, width, height, &d_map)?;
    for i in 0..n_px * 3 {
        if !excluded[i / 3] {
            grad[i] += d_x[i];
        }
    }
    Ok(ValueGrad { value: lambda * l1 + (1.0 - lambda) * (1.0 - ssim) * 0.5, grad })
}

/// Uniform direction on the upper (`z ≥ 0`) unit hemisphere.
pub fn sample_upper_hemisphere(rng: &mut impl Rng) -> Vector3<f64> {
    let z: f64 = rng.random();
    let phi = 2.0 * PI * rng.random::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Mean over `samples` hemisphere directions of `‖min(0, L(ω))‖²`; the
/// gradient is with respect to the flattened (channel-major) coefficients.
pub fn loss_light(light: &ShCoefficients, samples: usize, rng: &mut impl Rng) -> ValueGrad {
    let k = light.len_per_channel();
    let mut grad = vec![0.0; 3 * k];
    let mut value = 0.0;
    let m = samples.max(1) as f64;
    for _ in 0..samples {
        let y = basis(&sample_upper_hemisphere(rng));
        let l = eval_with_basis(light, &y);
        for (c, lc) in l.iter().enumerate() {
            let neg = lc.min(0.0);
            value += neg * neg;
            if neg < 0.0 {
                for j in 0..k {
                    grad[c * k + j] += 2.0 * neg * y[j] / m;
                }
            }
        }
    }
    ValueGrad { value: value / m, grad }
}

/// Sum over Gaussians of the smallest scale, and the gradient with respect
/// to the log-scales.
pub fn loss_scale(log_scales: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    let mut value = 0.0;
    let grads = log_scales
        .iter()
        .map(|ls| {
            let k = crate::geometry::shortest_axis(ls);
            let s = ls[k].exp();
            value += s;
            let mut g = [0.0; 3];
            g[k] = s;
            g
        })
        .collect();
    (value, grads)
}

/// Both parts of the fg/sky separation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FgSkyLoss {
    /// Foreground color on the region that should belong to the sky.
    pub fg_leak: f64,
    /// Sky color on the region that should belong to the foreground.
    pub sky_leak: f64,
    pub d_fg: Vec<f64>,
    pub d_sky: Vec<f64>,
}

impl FgSkyLoss {
    pub fn value(&self) -> f64 {
        self.fg_leak + self.sky_leak
    }
}

/// Mean absolute cross-region color of the fg-only and sky-only renders
/// over non-excluded pixels and channels.
pub fn loss_fg_sky(
    fg_only: &[f64],
    sky_only: &[f64],
    width: usize,
    height: usize,
    sky_mask: &[bool],
    excluded: &[bool],
    literal_masks: bool,
) -> Result<FgSkyLoss, LossError> {
    let n_px = width * height;
    check_len("foreground render", fg_only.len(), n_px * 3)?;
    check_len("sky render", sky_only.len(), n_px * 3)?;
    check_len("sky mask", sky_mask.len(), n_px)?;
    check_len("exclusion mask", excluded.len(), n_px)?;
    let mut out = FgSkyLoss { fg_leak: 0.0, sky_leak: 0.0, d_fg: vec![0.0; n_px * 3], d_sky: vec![0.0; n_px * 3] };
    let count = included_count(excluded);
    if count == 0 {
        return Ok(out);
    }
    let n = (count * 3) as f64;
    for p in 0..n_px {
        if excluded[p] {
            continue;
        }
        let fg_region_is_sky = sky_mask[p] != literal_masks;
        for c in 0..3 {
            let i = p * 3 + c;
            if fg_region_is_sky {
                out.fg_leak += fg_only[i].abs() / n;
                out.d_fg[i] = fg_only[i].signum() * f64::from(fg_only[i] != 0.0) / n;
            } else {
                out.sky_leak += sky_only[i].abs() / n;
                out.d_sky[i] = sky_only[i].signum() * f64::from(sky_only[i] != 0.0) / n;
            }
        }
    }
    Ok(out)
}

/// `exp(−γ(d̄_sky − d̄_fg))`.
pub fn sky_depth_penalty(mean_fg_depth: f64, mean_sky_depth: f64, gamma: f64) -> f64 {
    (-gamma * (mean_sky_depth - mean_fg_depth)).exp()
}

/// Sky-depth ordering term over visible Gaussians (foreground first in the
/// global order). Returns 0 and no gradient when either kind is invisible.
pub fn loss_sky_depth(camera_depths: &[f64], visible: &[bool], foreground_count: usize, gamma: f64) -> ValueGrad {
    let n = camera_depths.len();
    let mut grad = vec![0.0; n];
    let (mut fg_sum, mut fg_n, mut sky_sum, mut sky_n) = (0.0, 0usize, 0.0, 0usize);
    for i in (0..n).filter(|i| visible[*i]) {
        if i < foreground_count {
            fg_sum += camera_depths[i];
            fg_n += 1;
        } else {
            sky_sum += camera_depths[i];
            sky_n += 1;
        }
    }
    if fg_n == 0 || sky_n == 0 {
        return ValueGrad { value: 0.0, grad };
    }
    let value = sky_depth_penalty(fg_sum / fg_n as f64, sky_sum / sky_n as f64, gamma);
    for i in (0..n).filter(|i| visible[*i]) {
        grad[i] = if i < foreground_count { gamma * value / fg_n as f64 } else { -gamma * value / sky_n as f64 };
    }
    ValueGrad { value, grad }
}

/// Blend-weight sums per Gaussian over the non-excluded pixels.
pub fn masked_weight_sums(records: &[Vec<BlendRecord>], excluded: &[bool], n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for (recs, _) in records.iter().zip(excluded).filter(|(_, e)| !**e) {
        for r in recs {
            w[r.gaussian as usize] += r.weight();
        }
    }
    w
}

fn back_project(depth: &[f64], camera: &Camera, x: usize, y: usize) -> (Vector3<f64>, Vector3<f64>) {
    let r = Vector3::new((x as f64 + 0.5 - camera.cx) / camera.fx, (y as f64 + 0.5 - camera.cy) / camera.fy, 1.0);
    (r * depth[y * camera.width + x], r)
}

/// Reference normal of one pixel in camera space, with what the backward needs.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PixelNormal {
    normal_cam: Vector3<f64>,
    cross_norm: f64,
    sign: f64,
}

fn pixel_normal(depth: &[f64], camera: &Camera, x: usize, y: usize) -> Option<PixelNormal> {
    let (pr, _) = back_project(depth, camera, x + 1, y);
    let (pl, _) = back_project(depth, camera, x - 1, y);
    let (pd, _) = back_project(depth, camera, x, y + 1);
    let (pu, _) = back_project(depth, camera, x, y - 1);
    let (p, _) = back_project(depth, camera, x, y);
    let c = (pr - pl).cross(&(pd - pu));
    let norm = c.norm();
    if norm <= 1e-300 || !norm.is_finite() {
        return None;
    }
    let u = c / norm;
    let sign = if u.dot(&p) > 0.0 { -1.0 } else { 1.0 };
    Some(PixelNormal { normal_cam: u * sign, cross_norm: norm, sign })
}

fn normal_valid(alpha: &[f64], excluded: &[bool], w: usize, h: usize, x: usize, y: usize) -> bool {
    if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h || excluded[y * w + x] {
        return false;
    }
    [(x, y), (x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)].iter().all(|(a, b)| alpha[b * w + a] >= NORMAL_COVERAGE)
}

/// World-space reference normals from the depth map: back-projected
/// positions, central differences, cross product, oriented toward the
/// camera. `None` where coverage is too low, at the border, or excluded.
pub fn reference_normals(
    depth: &[f64],
    alpha: &[f64],
    camera: &Camera,
    excluded: &[bool],
) -> Vec<Option<Vector3<f64>>> {
    let (w, h) = (camera.width, camera.height);
    (0..w * h)
        .map(|p| {
            let (x, y) = (p % w, p / w);
            if !normal_valid(alpha, excluded, w, h, x, y) {
                return None;
            }
            pixel_normal(depth, camera, x, y).map(|n| camera.rotation.transpose() * n.normal_cam)
        })
        .collect()
}

/// Accumulates into `d_depth` the gradient of `g · N(x, y)` (world space).
fn reference_normal_backward(depth: &[f64], camera: &Camera, x: usize, y: usize, g: &Vector3<f64>, d_depth: &mut [f64]) {
    let Some(pn) = pixel_normal(depth, camera, x, y) else { return };
    let g_cam = camera.rotation * g;
    let u = pn.normal_cam * pn.sign;
    let d_c = normalize_backward(&u, pn.cross_norm, &(g_cam * pn.sign));
    let (pr, rr) = back_project(depth, camera, x + 1, y);
    let (pl, rl) = back_project(depth, camera, x - 1, y);
    let (pd, rd) = back_project(depth, camera, x, y + 1);
    let (pu, ru) = back_project(depth, camera, x, y - 1);
    let (a, b) = (pr - pl, pd - pu);
    let d_a = b.cross(&d_c);
    let d_b = d_c.cross(&a);
    let w = camera.width;
    d_depth[y * w + x + 1] += rr.dot(&d_a);
    d_depth[y * w + x - 1] -= rl.dot(&d_a);
    d_depth[(y + 1) * w + x] += rd.dot(&d_b);
    d_depth[(y - 1) * w + x] -= ru.dot(&d_b);
}

/// Normal-consistency loss and the pieces the trainer chains further.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalLoss {
    pub value: f64,
    /// Gradient with respect to each foreground Gaussian's normal.
    pub d_normals: Vec<Vector3<f64>>,
    /// Gradient with respect to the depth map.
    pub d_depth: Vec<f64>,
    /// Per-Gaussian feature `(1 − n·N)/P` (0 for sky); the value equals
    /// the blend of this feature summed over `pixel_mask`.
    pub feature: Vec<f64>,
    /// Pixels whose blend weights count toward the loss.
    pub pixel_mask: Vec<bool>,
}

/// `Σ_i (W_i/P)(1 − n_i·N_{p*(i)})` over foreground Gaussians, where `W_i`
/// sums the Gaussian's blend weights over pixels with a reference normal,
/// `p*(i)` is its maximum-weight such pixel, and `P` is the number of
/// non-excluded pixels.
pub fn loss_normal(
    normals: &[Vector3<f64>],
    records: &[Vec<BlendRecord>],
    depth: &[f64],
    alpha: &[f64],
    camera: &Camera,
    excluded: &[bool],
    gaussian_count: usize,
) -> Result<NormalLoss, LossError> {
    let n_px = camera.pixel_count();
    check_len("depth", depth.len(), n_px)?;
    check_len("alpha", alpha.len(), n_px)?;
    check_len("exclusion mask", excluded.len(), n_px)?;
    check_len("records", records.len(), n_px)?;
    let nf = normals.len();
    let refs = reference_normals(depth, alpha, camera, excluded);
    let count = included_count(excluded);
    let mut out = NormalLoss {
        value: 0.0,
        d_normals: vec![Vector3::zeros(); nf],
        d_depth: vec![0.0; n_px],
        feature: vec![0.0; gaussian_count],
        pixel_mask: refs.iter().map(Option::is_some).collect(),
    };
    if count == 0 {
        return Ok(out);
    }
    let inv_p = 1.0 / count as f64;
    let mut weight = vec![0.0; nf];
    let mut best: Vec<Option<(f64, usize)>> = vec![None; nf];
    for (p, recs) in records.iter().enumerate() {
        if refs[p].is_none() {
            continue;
        }
        for r in recs.iter().filter(|r| (r.gaussian as usize) < nf) {
            let g = r.gaussian as usize;
            let w = r.weight();
            weight[g] += w;
            if best[g].is_none_or(|(bw, _)| w > bw) {
                best[g] = Some((w, p));
            }
        }
    }
    for g in 0..nf {
        let Some((_, p)) = best[g] else { continue };
        let n_ref = refs[p].expect("best pixel has a reference normal");
        let f = (1.0 - normals[g].dot(&n_ref)) * inv_p;
        out.feature[g] = f;
        out.value += weight[g] * f;
        let s = weight[g] * inv_p;
        out.d_normals[g] = -n_ref * s;
        reference_normal_backward(depth, camera, p % camera.width, p / camera.width, &(-normals[g] * s), &mut out.d_depth);
    }
    Ok(out)
}
