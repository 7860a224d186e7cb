//! Differentiable CPU splatting rasterizer.
//!
//! The core works on generic `K`-channel per-Gaussian features so the same
//! blending code renders color, depth numerators and auxiliary attributes.
//! Splats are depth-sorted once per view; pixels are processed in 16×16
//! tiles in parallel, and every per-tile gradient buffer is merged in tile
//! order so results do not depend on the worker count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

pub const TILE_SIZE: usize = 16;
pub const COV2D_DILATION: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const DEFAULT_NEAR: f64 = 0.01;
const EXTENT_SIGMAS: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("gaussian {0} has non-finite parameters")]
    NonFinite(usize),
    #[error("buffer size mismatch for {what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
}

/// Pinhole camera with a world-to-camera rigid transform (x right, y down, z forward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, RasterError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(RasterError::Camera(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width < 8 || height < 8 {
            return Err(RasterError::Camera(format!("image {width}x{height} is smaller than 8x8")));
        }
        if (rotation * rotation.transpose() - Matrix3::identity()).norm() > 1e-6 {
            return Err(RasterError::Camera("rotation is not orthonormal".into()));
        }
        Ok(Self { rotation, translation, fx, fy, cx, cy, width, height, near: DEFAULT_NEAR })
    }

    /// Camera looking from `eye` toward `target`, with image-up roughly along `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, RasterError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation, focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit world-space ray direction through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        let d = Vector3::new((x as f64 + 0.5 - self.cx) / self.fx, (y as f64 + 0.5 - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Inclusive pixel range `[x0, x1] × [y0, y1]` covered by the 3σ box.
    pub pixels: [usize; 4],
}

/// Projection Jacobian of the pinhole map at camera-space point `t`.
fn projection_jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * t.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * t.y * iz * iz,
    )
}

/// Projects a Gaussian; `None` when culled by the near plane or the viewport.
pub fn project_gaussian(mean: &Vector3<f64>, cov: &Matrix3<f64>, camera: &Camera) -> Option<Projected> {
    let t = camera.to_camera(mean);
    if t.z < camera.near {
        return None;
    }
    let mean2d = Vector2::new(camera.fx * t.x / t.z + camera.cx, camera.fy * t.y / t.z + camera.cy);
    let m = projection_jacobian(camera, &t) * camera.rotation;
    let cov2d = m * cov * m.transpose() + Matrix2::identity() * COV2D_DILATION;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
    let ex = EXTENT_SIGMAS * cov2d[(0, 0)].sqrt();
    let ey = EXTENT_SIGMAS * cov2d[(1, 1)].sqrt();
    // Pixel x (center x + 0.5) is covered when |x + 0.5 - mean| <= extent.
    let x0 = (mean2d.x - ex - 0.5).ceil().max(0.0);
    let x1 = (mean2d.x + ex - 0.5).floor().min(camera.width as f64 - 1.0);
    let y0 = (mean2d.y - ey - 0.5).ceil().max(0.0);
    let y1 = (mean2d.y + ey - 0.5).floor().min(camera.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some(Projected { mean2d, cov2d, conic, depth: t.z, pixels: [x0 as usize, x1 as usize, y0 as usize, y1 as usize] })
}

/// Geometry and features of the splats to rasterize.
#[derive(Debug, Clone, Copy)]
pub struct Splats<'a> {
    pub means: &'a [Vector3<f64>],
    pub covariances: &'a [Matrix3<f64>],
    pub opacities: &'a [f64],
    /// Row-major `N × channels`.
    pub features: &'a [f64],
    pub channels: usize,
}

impl Splats<'_> {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    fn check(&self) -> Result<(), RasterError> {
        let n = self.len();
        for (what, got) in [
            ("covariances", self.covariances.len()),
            ("opacities", self.opacities.len()),
            ("features", self.features.len() / self.channels.max(1)),
        ] {
            if got != n {
                return Err(RasterError::Shape { what, expected: n, got });
            }
        }
        if self.features.len() != n * self.channels {
            return Err(RasterError::Shape { what: "features", expected: n * self.channels, got: self.features.len() });
        }
        for i in 0..n {
            let finite = self.means[i].iter().all(|v| v.is_finite())
                && self.covariances[i].iter().all(|v| v.is_finite())
                && self.opacities[i].is_finite()
                && self.features[i * self.channels..(i + 1) * self.channels].iter().all(|v| v.is_finite());
            if !finite {
                return Err(RasterError::NonFinite(i));
            }
        }
        Ok(())
    }
}

/// One blended splat at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendRecord {
    pub gaussian: u32,
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
    /// Whether `alpha` hit the upper clip.
    clipped: bool,
}

impl BlendRecord {
    pub fn weight(&self) -> f64 {
        self.alpha * self.transmittance
    }
}

/// Forward state retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Rasterized {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major `H × W × channels` blended features.
    pub image: Vec<f64>,
    /// Accumulated alpha `1 − Π(1 − α)` per pixel.
    pub alpha: Vec<f64>,
    /// Per-Gaussian projection, `None` when culled.
    pub projections: Vec<Option<Projected>>,
    /// Per-pixel blend records in front-to-back order.
    pub records: Vec<Vec<BlendRecord>>,
}

impl Rasterized {
    /// Sum of blend weights over all pixels per Gaussian.
    pub fn weight_sums(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for px in &self.records {
            for r in px {
                out[r.gaussian as usize] += r.weight();
            }
        }
        out
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.image[i..i + self.channels]
    }
}

fn tiles(camera: &Camera) -> (usize, usize) {
    (camera.width.div_ceil(TILE_SIZE), camera.height.div_ceil(TILE_SIZE))
}

/// Depth-sorted visible splats binned per tile.
fn bin(projections: &[Option<Projected>], camera: &Camera) -> Vec<Vec<u32>> {
    let mut order: Vec<usize> = (0..projections.len()).filter(|&i| projections[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (projections[a].unwrap().depth, projections[b].unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let (tx, ty) = tiles(camera);
    let mut lists = vec![Vec::new(); tx * ty];
    for i in order {
        let [x0, x1, y0, y1] = projections[i].unwrap().pixels;
        for ty_i in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx_i in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                lists[ty_i * tx + tx_i].push(i as u32);
            }
        }
    }
    lists
}

fn tile_pixels(camera: &Camera, tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, _) = tiles(camera);
    let (bx, by) = ((tile % tx) * TILE_SIZE, (tile / tx) * TILE_SIZE);
    let (ex, ey) = ((bx + TILE_SIZE).min(camera.width), (by + TILE_SIZE).min(camera.height));
    (by..ey).flat_map(move |y| (bx..ex).map(move |x| (x, y)))
}

fn gaussian_response(p: &Projected, x: usize, y: usize) -> (f64, f64, f64) {
    let dx = x as f64 + 0.5 - p.mean2d.x;
    let dy = y as f64 + 0.5 - p.mean2d.y;
    let [a, b, c] = p.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    ((-0.5 * q).exp(), dx, dy)
}

fn covers(p: &Projected, x: usize, y: usize) -> bool {
    let [x0, x1, y0, y1] = p.pixels;
    x >= x0 && x <= x1 && y >= y0 && y <= y1
}

pub fn rasterize(splats: &Splats<'_>, camera: &Camera) -> Result<Rasterized, RasterError> {
    splats.check()?;
    let k = splats.channels;
    let projections: Vec<Option<Projected>> = (0..splats.len())
        .into_par_iter()
        .map(|i| project_gaussian(&splats.means[i], &splats.covariances[i], camera))
        .collect();
    let lists = bin(&projections, camera);
    let per_tile: Vec<Vec<(usize, Vec<f64>, f64, Vec<BlendRecord>)>> = (0..lists.len())
        .into_par_iter()
        .map(|tile| {
            tile_pixels(camera, tile)
                .map(|(x, y)| {
                    let mut acc = vec![0.0; k];
                    let mut t = 1.0;
                    let mut recs = Vec::new();
                    for &gi in &lists[tile] {
                        let g = gi as usize;
                        let p = projections[g].as_ref().unwrap();
                        if !covers(p, x, y) {
                            continue;
                        }
                        let (resp, _, _) = gaussian_response(p, x, y);
                        let raw = splats.opacities[g] * resp;
                        let clipped = raw > MAX_ALPHA;
                        let alpha = raw.min(MAX_ALPHA);
                        let w = alpha * t;
                        let f = &splats.features[g * k..(g + 1) * k];
                        for (a, v) in acc.iter_mut().zip(f) {
                            *a += v * w;
                        }
                        recs.push(BlendRecord { gaussian: gi, alpha, transmittance: t, clipped });
                        t *= 1.0 - alpha;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    (y * camera.width + x, acc, 1.0 - t, recs)
                })
                .collect()
        })
        .collect();
    let n_px = camera.pixel_count();
    let mut image = vec![0.0; n_px * k];
    let mut alpha = vec![0.0; n_px];
    let mut records = vec![Vec::new(); n_px];
    for tile in per_tile {
        for (pix, acc, a, recs) in tile {
            image[pix * k..(pix + 1) * k].copy_from_slice(&acc);
            alpha[pix] = a;
            records[pix] = recs;
        }
    }
    Ok(Rasterized { width: camera.width, height: camera.height, channels: k, image, alpha, projections, records })
}

/// Gradients of [`rasterize`] inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub means: Vec<Vector3<f64>>,
    /// Symmetric-matrix gradients of the 3D covariances.
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    /// Row-major `N × channels`.
    pub features: Vec<f64>,
    /// Screen-space mean gradients in pixels (used for densification).
    pub means2d: Vec<Vector2<f64>>,
}

const G_MX: usize = 0;
const G_MY: usize = 1;
const G_CA: usize = 2;
const G_CB: usize = 3;
const G_CC: usize = 4;
const G_OP: usize = 5;
const G_FEAT: usize = 6;

/// Backward pass given upstream gradients on the blended image (`H·W·K`)
/// and on the accumulated alpha (`H·W`).
pub fn rasterize_backward(
    splats: &Splats<'_>,
    camera: &Camera,
    fwd: &Rasterized,
    d_image: &[f64],
    d_alpha: &[f64],
) -> Result<SplatGrads, RasterError> {
    let k = splats.channels;
    let n_px = camera.pixel_count();
    if d_image.len() != n_px * k {
        return Err(RasterError::Shape { what: "image gradient", expected: n_px * k, got: d_image.len() });
    }
    if d_alpha.len() != n_px {
        return Err(RasterError::Shape { what: "alpha gradient", expected: n_px, got: d_alpha.len() });
    }
    let stride = G_FEAT + k;
    let n = splats.len();
    let (tx, ty) = tiles(camera);
    // Each tile reports (gaussian, gradient block) pairs in first-touch order.
    let per_tile: Vec<(Vec<u32>, Vec<f64>)> = (0..tx * ty)
        .into_par_iter()
        .map(|tile| {
            let mut slot_of: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
            let mut ids: Vec<u32> = Vec::new();
            let mut buf: Vec<f64> = Vec::new();
            let mut suffix = vec![0.0; k];
            for (x, y) in tile_pixels(camera, tile) {
                let pix = y * camera.width + x;
                let recs = &fwd.records[pix];
                if recs.is_empty() {
                    continue;
                }
                let g_img = &d_image[pix * k..(pix + 1) * k];
                let g_a = d_alpha[pix];
                if g_a == 0.0 && g_img.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let t_final = 1.0 - fwd.alpha[pix];
                suffix.iter_mut().for_each(|s| *s = 0.0);
                for r in recs.iter().rev() {
                    let g = r.gaussian as usize;
                    let slot = *slot_of.entry(r.gaussian).or_insert_with(|| {
                        ids.push(r.gaussian);
                        buf.extend(std::iter::repeat_n(0.0, stride));
                        ids.len() - 1
                    });
                    let b = &mut buf[slot * stride..(slot + 1) * stride];
                    let w = r.weight();
                    let f = &splats.features[g * k..(g + 1) * k];
                    let mut d_alpha_i = 0.0;
                    let one_minus = 1.0 - r.alpha;
                    for c in 0..k {
                        b[G_FEAT + c] += g_img[c] * w;
                        d_alpha_i += g_img[c] * (f[c] * r.transmittance - suffix[c] / one_minus);
                        suffix[c] += f[c] * w;
                    }
                    d_alpha_i += g_a * t_final / one_minus;
                    if r.clipped {
                        continue;
                    }
                    let p = fwd.projections[g].as_ref().unwrap();
                    let (resp, dx, dy) = gaussian_response(p, x, y);
                    let o = splats.opacities[g];
                    b[G_OP] += d_alpha_i * resp;
                    let d_q = d_alpha_i * o * resp * -0.5;
                    let [a, bb, c] = p.conic;
                    b[G_MX] += d_q * -(2.0 * a * dx + 2.0 * bb * dy);
                    b[G_MY] += d_q * -(2.0 * bb * dx + 2.0 * c * dy);
                    b[G_CA] += d_q * dx * dx;
                    b[G_CB] += d_q * 2.0 * dx * dy;
                    b[G_CC] += d_q * dy * dy;
                }
            }
            (ids, buf)
        })
        .collect();
    let mut acc = vec![0.0; n * stride];
    for (ids, buf) in per_tile {
        for (slot, &gi) in ids.iter().enumerate() {
            let dst = &mut acc[gi as usize * stride..(gi as usize + 1) * stride];
            for (d, s) in dst.iter_mut().zip(&buf[slot * stride..(slot + 1) * stride]) {
                *d += s;
            }
        }
    }
    let chained: Vec<(Vector3<f64>, Matrix3<f64>, Vector2<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| match &fwd.projections[i] {
            None => (Vector3::zeros(), Matrix3::zeros(), Vector2::zeros()),
            Some(p) => chain_projection(&splats.means[i], &splats.covariances[i], camera, p, &acc[i * stride..]),
        })
        .collect();
    let mut grads = SplatGrads {
        means: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        features: Vec::with_capacity(n * k),
        means2d: Vec::with_capacity(n),
    };
    for (i, (dm, dc, d2)) in chained.into_iter().enumerate() {
        grads.means.push(dm);
        grads.covariances.push(dc);
        grads.means2d.push(d2);
        grads.opacities.push(acc[i * stride + G_OP]);
        grads.features.extend_from_slice(&acc[i * stride + G_FEAT..(i + 1) * stride]);
    }
    Ok(grads)
}

/// Chains screen-space gradients (mean2d, conic) back to the 3D mean and covariance.
fn chain_projection(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    camera: &Camera,
    p: &Projected,
    g: &[f64],
) -> (Vector3<f64>, Matrix3<f64>, Vector2<f64>) {
    let d_mean2d = Vector2::new(g[G_MX], g[G_MY]);
    let [a, b, c] = p.conic;
    let conic = Matrix2::new(a, b, b, c);
    // The off-diagonal conic entry appears twice in the quadratic form.
    let g_conic = Matrix2::new(g[G_CA], 0.5 * g[G_CB], 0.5 * g[G_CB], g[G_CC]);
    let g_cov2d = -(conic * g_conic * conic);
    let t = camera.to_camera(mean);
    let jac = projection_jacobian(camera, &t);
    let w = camera.rotation;
    let m = jac * w;
    let d_cov3 = m.transpose() * g_cov2d * m;
    let d_m = 2.0 * g_cov2d * m * cov;
    let d_j = d_m * w.transpose();
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = Vector3::new(
        d_mean2d.x * fx * iz,
        d_mean2d.y * fy * iz,
        -d_mean2d.x * fx * t.x * iz2 - d_mean2d.y * fy * t.y * iz2,
    );
    d_t.x += d_j[(0, 2)] * -fx * iz2;
    d_t.y += d_j[(1, 2)] * -fy * iz2;
    d_t.z += d_j[(0, 0)] * -fx * iz2
        + d_j[(0, 2)] * 2.0 * fx * t.x * iz3
        + d_j[(1, 1)] * -fy * iz2
        + d_j[(1, 2)] * 2.0 * fy * t.y * iz3;
    (w.transpose() * d_t, d_cov3, d_mean2d)
}
