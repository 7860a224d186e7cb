//! Scene-level rendering on top of the generic rasterizer: color modes,
//! depth maps, and gradients mapped back to Gaussian parameters.

use nalgebra::{Matrix3, Vector3};

use crate::geometry::covariance_backward;
use crate::raster::{rasterize, rasterize_backward, Camera, RasterError, Rasterized, SplatGrads, Splats};
use crate::scene::{sky_position, spherical_direction, spherical_direction_derivatives, Scene, FG_PARAMS, SKY_PARAMS};

/// Which Gaussians keep their colors; geometry always participates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    Full,
    ForegroundOnly,
    SkyOnly,
}

impl ColorMode {
    pub fn keeps(self, is_sky: bool) -> bool {
        match self {
            ColorMode::Full => true,
            ColorMode::ForegroundOnly => !is_sky,
            ColorMode::SkyOnly => is_sky,
        }
    }
}

/// World-space geometry of all Gaussians, foreground first, then sky.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub foreground_count: usize,
}

impl SceneGeometry {
    pub fn new(scene: &Scene) -> Self {
        let mut means = Vec::with_capacity(scene.foreground.len() + scene.sky.len());
        let mut covariances = Vec::with_capacity(means.capacity());
        let mut opacities = Vec::with_capacity(means.capacity());
        for g in &scene.foreground {
            means.push(g.position);
            covariances.push(g.covariance());
            opacities.push(g.opacity());
        }
        for g in &scene.sky {
            means.push(sky_position(g, &scene.dome));
            covariances.push(g.covariance());
            opacities.push(g.opacity());
        }
        Self { means, covariances, opacities, foreground_count: scene.foreground.len() }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn is_sky(&self, i: usize) -> bool {
        i >= self.foreground_count
    }

    pub fn splats<'a>(&'a self, features: &'a [f64], channels: usize) -> Splats<'a> {
        Splats { means: &self.means, covariances: &self.covariances, opacities: &self.opacities, features, channels }
    }
}

/// Gradients for every learnable scene parameter in the flattened layouts
/// of [`crate::scene::ForegroundGaussian::to_array`] and
/// [`crate::scene::SkyGaussian::to_array`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub foreground: Vec<[f64; FG_PARAMS]>,
    pub sky: Vec<[f64; SKY_PARAMS]>,
    pub radius: f64,
}

impl SceneGrad {
    pub fn zeros(scene: &Scene) -> Self {
        Self {
            foreground: vec![[0.0; FG_PARAMS]; scene.foreground.len()],
            sky: vec![[0.0; SKY_PARAMS]; scene.sky.len()],
            radius: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &SceneGrad) {
        for (a, b) in self.foreground.iter_mut().zip(&other.foreground) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.sky.iter_mut().zip(&other.sky) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.radius += other.radius;
    }

    /// Adds a world-space gradient on the mean of Gaussian `i` (global index).
    pub fn add_mean_gradient(&mut self, scene: &Scene, i: usize, d: &Vector3<f64>) {
        let nf = scene.foreground.len();
        if i < nf {
            for k in 0..3 {
                self.foreground[i][k] += d[k];
            }
        } else {
            let g = &scene.sky[i - nf];
            let (d_theta, d_phi) = spherical_direction_derivatives(g.theta, g.phi);
            let r = scene.dome.radius;
            self.sky[i - nf][0] += r * d.dot(&d_theta);
            self.sky[i - nf][1] += r * d.dot(&d_phi);
            self.radius += d.dot(&spherical_direction(g.theta, g.phi));
        }
    }
}

/// Maps rasterizer geometry gradients back to scene parameters.
pub fn geometry_backward(scene: &Scene, grads: &SplatGrads) -> SceneGrad {
    let mut out = SceneGrad::zeros(scene);
    let nf = scene.foreground.len();
    for (i, g) in scene.foreground.iter().enumerate() {
        let (dq, dls) = covariance_backward(&g.rotation, &g.log_scales, &grads.covariances[i]);
        let o = g.opacity();
        let a = &mut out.foreground[i];
        a[3..7].copy_from_slice(&dq);
        a[7..10].copy_from_slice(&dls);
        a[10] = grads.opacities[i] * o * (1.0 - o);
    }
    for (s, g) in scene.sky.iter().enumerate() {
        let i = nf + s;
        let (dq, dls) = covariance_backward(&g.rotation, &g.log_scales, &grads.covariances[i]);
        let o = g.opacity();
        let a = &mut out.sky[s];
        a[2..6].copy_from_slice(&dq);
        a[6..9].copy_from_slice(&dls);
        a[9] = grads.opacities[i] * o * (1.0 - o);
    }
    for i in 0..scene.foreground.len() + scene.sky.len() {
        out.add_mean_gradient(scene, i, &grads.means[i]);
    }
    out
}

/// Color, depth and coverage of one view.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W × 3`.
    pub color: Vec<f64>,
    /// Blend-weighted mean camera depth, 0 where nothing is blended.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Per-Gaussian blend-weight sums (foreground first, then sky).
    pub weight_sums: Vec<f64>,
    pub raster: Rasterized,
}

const RENDER_CHANNELS: usize = 4;

fn render_features(geometry: &SceneGeometry, camera: &Camera, colors: &[[f64; 3]], mode: ColorMode) -> Vec<f64> {
    let mut f = Vec::with_capacity(geometry.len() * RENDER_CHANNELS);
    for (i, c) in colors.iter().enumerate() {
        let keep = mode.keeps(geometry.is_sky(i));
        f.extend(c.iter().map(|v| if keep { *v } else { 0.0 }));
        f.push(camera.to_camera(&geometry.means[i]).z);
    }
    f
}

/// Renders with per-Gaussian colors (foreground first, then sky).
pub fn render(scene: &Scene, camera: &Camera, colors: &[[f64; 3]], mode: ColorMode) -> Result<RenderOutput, RasterError> {
    scene.validate().map_err(|e| match e {
        crate::scene::SceneError::NonFinite { kind, index } => {
            RasterError::NonFinite(if kind == "sky" { scene.foreground.len() + index } else { index })
        }
        crate::scene::SceneError::TooFewPoints(_) => unreachable!("validate never reports point counts"),
    })?;
    let geometry = SceneGeometry::new(scene);
    if colors.len() != geometry.len() {
        return Err(RasterError::Shape { what: "colors", expected: geometry.len(), got: colors.len() });
    }
    let features = render_features(&geometry, camera, colors, mode);
    let raster = rasterize(&geometry.splats(&features, RENDER_CHANNELS), camera)?;
    let n_px = camera.pixel_count();
    let mut color = Vec::with_capacity(n_px * 3);
    let mut depth = Vec::with_capacity(n_px);
    for p in 0..n_px {
        let px = &raster.image[p * RENDER_CHANNELS..(p + 1) * RENDER_CHANNELS];
        color.extend_from_slice(&px[..3]);
        let a = raster.alpha[p];
        depth.push(if a > 0.0 { px[3] / a } else { 0.0 });
    }
    let weight_sums = raster.weight_sums(geometry.len());
    Ok(RenderOutput {
        width: camera.width,
        height: camera.height,
        color,
        depth,
        alpha: raster.alpha.clone(),
        weight_sums,
        raster,
    })
}

/// Gradients of a [`render`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad {
    pub scene: SceneGrad,
    pub colors: Vec<[f64; 3]>,
    /// Screen-space mean gradients per Gaussian, in pixels.
    pub means2d: Vec<[f64; 2]>,
}

/// Backward of [`render`] for upstream gradients on color (`H·W·3`),
/// depth and alpha (`H·W` each).
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    scene: &Scene,
    camera: &Camera,
    colors: &[[f64; 3]],
    mode: ColorMode,
    out: &RenderOutput,
    d_color: &[f64],
    d_depth: &[f64],
    d_alpha: &[f64],
) -> Result<RenderGrad, RasterError> {
    let geometry = SceneGeometry::new(scene);
    let features = render_features(&geometry, camera, colors, mode);
    let n_px = camera.pixel_count();
    let mut d_image = vec![0.0; n_px * RENDER_CHANNELS];
    let mut d_acc = d_alpha.to_vec();
    for p in 0..n_px {
        d_image[p * RENDER_CHANNELS..p * RENDER_CHANNELS + 3].copy_from_slice(&d_color[p * 3..p * 3 + 3]);
        let a = out.alpha[p];
        if a > 0.0 && d_depth[p] != 0.0 {
            let num = out.raster.image[p * RENDER_CHANNELS + 3];
            d_image[p * RENDER_CHANNELS + 3] = d_depth[p] / a;
            d_acc[p] -= d_depth[p] * num / (a * a);
        }
    }
    let splats = geometry.splats(&features, RENDER_CHANNELS);
    let grads = rasterize_backward(&splats, camera, &out.raster, &d_image, &d_acc)?;
    let mut scene_grad = geometry_backward(scene, &grads);
    let depth_axis: Vector3<f64> = camera.rotation.row(2).transpose();
    let mut d_colors = Vec::with_capacity(geometry.len());
    for i in 0..geometry.len() {
        let f = &grads.features[i * RENDER_CHANNELS..(i + 1) * RENDER_CHANNELS];
        let keep = mode.keeps(geometry.is_sky(i));
        d_colors.push(if keep { [f[0], f[1], f[2]] } else { [0.0; 3] });
        scene_grad.add_mean_gradient(scene, i, &(depth_axis * f[3]));
    }
    Ok(RenderGrad { scene: scene_grad, colors: d_colors, means2d: grads.means2d.iter().map(|m| [m.x, m.y]).collect() })
}
