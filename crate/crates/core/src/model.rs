//! The full differentiable pipeline for one training view:
//! appearance → shading → rasterization → losses, and its backward pass.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::appearance::{AppearanceError, AppearanceMlp, EmbeddingTable};
use crate::brdf::BrdfLut;
use crate::losses::{
    loss_fg_sky, loss_light, loss_normal, loss_rec, loss_scale, loss_sky_depth, masked_weight_sums, total_loss,
    LossError, LossTerms, LossWeights, VISIBILITY_WEIGHT,
};
use crate::raster::{rasterize, rasterize_backward, Camera, RasterError};
use crate::render::{geometry_backward, SceneGeometry, SceneGrad};
use crate::scene::Scene;
use crate::sh::{BlurExponent, ShCoefficients, ShError};
use crate::shading::{
    shade_foreground, shade_foreground_backward, shade_sky, shade_sky_backward, ForegroundInput, LightContext,
    SkyInput, LIGHT_DEGREE, LIGHT_PARAMS, SKY_DEGREE, SKY_PARAMS,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sh(#[from] ShError),
    #[error("view has {got} values in {what}, expected {expected}")]
    Shape { what: &'static str, expected: usize, got: usize },
}

/// Everything that is optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub scene: Scene,
    pub mlp: AppearanceMlp,
    pub embeddings: EmbeddingTable,
}

/// One supervised image.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub id: String,
    /// Row of the embedding table.
    pub index: usize,
    pub camera: Camera,
    /// Row-major `H × W × 3`, display (gamma-encoded) values in `[0, 1]`.
    pub image: Vec<f64>,
    pub sky_mask: Vec<bool>,
    pub occluder_mask: Vec<bool>,
}

impl TrainingView {
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.camera.pixel_count();
        for (what, got, expected) in [
            ("image", self.image.len(), n * 3),
            ("sky mask", self.sky_mask.len(), n),
            ("occluder mask", self.occluder_mask.len(), n),
        ] {
            if got != expected {
                return Err(ModelError::Shape { what, expected, got });
            }
        }
        Ok(())
    }
}

/// Lights decoded for one image.
pub fn decode_lights(model: &Model, index: usize) -> Result<(ShCoefficients, ShCoefficients), ModelError> {
    Ok(model.mlp.forward(model.embeddings.row(index)?)?)
}

/// Per-Gaussian colors (foreground first, then sky) under the given lights.
pub fn shade_scene(
    scene: &Scene,
    camera: &Camera,
    light: &ShCoefficients,
    sky: &ShCoefficients,
    lut: &BrdfLut,
    blur: BlurExponent,
) -> Result<Vec<[f64; 3]>, ModelError> {
    let ctx = LightContext::new(light, lut, blur)?;
    let center = camera.center();
    let mut colors: Vec<[f64; 3]> = scene
        .foreground
        .par_iter()
        .map(|g| {
            shade_foreground(
                &ForegroundInput {
                    position: g.position,
                    rotation: g.rotation,
                    log_scales: g.log_scales,
                    material: g.material,
                    camera_center: center,
                },
                &ctx,
            )
            .color
        })
        .collect();
    colors.extend(
        scene.sky_positions().iter().map(|p| shade_sky(&SkyInput { position: *p, camera_center: center }, sky)),
    );
    Ok(colors)
}

/// Channels of the training rasterization.
const CH_RGB: usize = 0;
const CH_DEPTH: usize = 3;
const CH_FG: usize = 4;
const CH_NORMAL: usize = 7;
const CHANNELS: usize = 8;

/// Gradient of the total loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub scene: SceneGrad,
    pub mlp: Vec<f64>,
    /// Same layout as [`EmbeddingTable::values`]; only the view's row is non-zero.
    pub embeddings: Vec<f64>,
}

/// Result of one forward/backward evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Unweighted loss terms.
    pub terms: LossTerms,
    /// Weighted total under the schedule.
    pub total: f64,
    pub grad: ModelGrad,
    /// Screen-space mean gradients in normalized device units, for densification.
    pub ndc_gradients: Vec<f64>,
    /// Gaussians that were projected on screen.
    pub in_view: Vec<bool>,
    /// Rendered display colors (`H × W × 3`).
    pub color: Vec<f64>,
    /// Foreground leakage part of the fg/sky term.
    pub fg_leak: f64,
}

/// Forward and backward for one view at `iteration`. `rng` drives the light
/// positivity samples.
pub fn evaluate(
    model: &Model,
    view: &TrainingView,
    lut: &BrdfLut,
    blur: BlurExponent,
    weights: &LossWeights,
    iteration: usize,
    rng: &mut impl Rng,
) -> Result<Evaluation, ModelError> {
    view.validate()?;
    let scene = &model.scene;
    let camera = &view.camera;
    let (w, h) = (camera.width, camera.height);
    let n_px = camera.pixel_count();
    let nf = scene.foreground.len();
    let embedding = model.embeddings.row(view.index)?;
    let (light_raw, sky_raw, cache) = model.mlp.forward_raw(embedding)?;
    let light = ShCoefficients::from_flat(LIGHT_DEGREE, &light_raw)?;
    let sky = ShCoefficients::from_flat(SKY_DEGREE, &sky_raw)?;
    let ctx = LightContext::new(&light, lut, blur)?;
    let center = camera.center();

    let fg_inputs: Vec<ForegroundInput> = scene
        .foreground
        .iter()
        .map(|g| ForegroundInput {
            position: g.position,
            rotation: g.rotation,
            log_scales: g.log_scales,
            material: g.material,
            camera_center: center,
        })
        .collect();
    let fg_shades: Vec<_> = fg_inputs.par_iter().map(|i| shade_foreground(i, &ctx)).collect();
    let sky_positions = scene.sky_positions();
    let sky_inputs: Vec<SkyInput> =
        sky_positions.iter().map(|p| SkyInput { position: *p, camera_center: center }).collect();
    let sky_colors: Vec<[f64; 3]> = sky_inputs.iter().map(|i| shade_sky(i, &sky)).collect();

    let geometry = SceneGeometry::new(scene);
    let n = geometry.len();
    let depths: Vec<f64> = geometry.means.iter().map(|m| camera.to_camera(m).z).collect();
    let mut features = vec![0.0; n * CHANNELS];
    for i in 0..n {
        let f = &mut features[i * CHANNELS..(i + 1) * CHANNELS];
        let c = if i < nf { fg_shades[i].color } else { sky_colors[i - nf] };
        f[CH_RGB..CH_RGB + 3].copy_from_slice(&c);
        f[CH_DEPTH] = depths[i];
        if i < nf {
            f[CH_FG..CH_FG + 3].copy_from_slice(&c);
        }
    }
    let raster = rasterize(&geometry.splats(&features, CHANNELS), camera)?;

    let mut color = vec![0.0; n_px * 3];
    let mut fg_img = vec![0.0; n_px * 3];
    let mut sky_img = vec![0.0; n_px * 3];
    let mut depth = vec![0.0; n_px];
    for p in 0..n_px {
        let px = &raster.image[p * CHANNELS..(p + 1) * CHANNELS];
        for c in 0..3 {
            color[p * 3 + c] = px[CH_RGB + c];
            fg_img[p * 3 + c] = px[CH_FG + c];
            sky_img[p * 3 + c] = px[CH_RGB + c] - px[CH_FG + c];
        }
        let a = raster.alpha[p];
        depth[p] = if a > 0.0 { px[CH_DEPTH] / a } else { 0.0 };
    }

    // Losses.
    let occ = &view.occluder_mask;
    let geo_excluded: Vec<bool> = occ.iter().zip(&view.sky_mask).map(|(o, s)| *o || *s).collect();
    let rec = loss_rec(&color, &view.image, w, h, occ, weights.rec_l1)?;
    let light_loss = loss_light(&light, weights.light_samples, rng);
    let normals: Vec<Vector3<f64>> = fg_shades.iter().map(|s| s.normal).collect();
    let normal = loss_normal(&normals, &raster.records, &depth, &raster.alpha, camera, &geo_excluded, n)?;
    let log_scales: Vec<[f64; 3]> = scene.foreground.iter().map(|g| g.log_scales).collect();
    let (scale_value, scale_grad) = loss_scale(&log_scales);
    let fg_sky =
        loss_fg_sky(&fg_img, &sky_img, w, h, &view.sky_mask, occ, weights.literal_fg_sky_masks)?;
    let visible: Vec<bool> =
        masked_weight_sums(&raster.records, occ, n).iter().map(|s| *s > VISIBILITY_WEIGHT).collect();
    let sky_depth = loss_sky_depth(&depths, &visible, nf, weights.gamma_sky_depth);
    let terms = LossTerms {
        rec: rec.value,
        light: light_loss.value,
        normal: normal.value,
        scale: scale_value,
        fg_sky: fg_sky.value(),
        sky_depth: sky_depth.value,
    };
    if let Some(name) = terms.first_non_finite() {
        return Err(LossError::NonFinite(name).into());
    }
    let (total, _) = total_loss(&terms, weights, iteration);
    let m = weights.multipliers(iteration);

    // Backward through the image-space losses into the raster channels.
    let mut d_image = vec![0.0; n_px * CHANNELS];
    let mut d_alpha = vec![0.0; n_px];
    for p in 0..n_px {
        let g = &mut d_image[p * CHANNELS..(p + 1) * CHANNELS];
        for c in 0..3 {
            let d_sky = m.fg_sky * fg_sky.d_sky[p * 3 + c];
            g[CH_RGB + c] = m.rec * rec.grad[p * 3 + c] + d_sky;
            g[CH_FG + c] = m.fg_sky * fg_sky.d_fg[p * 3 + c] - d_sky;
        }
        let d_depth = m.normal * normal.d_depth[p];
        let a = raster.alpha[p];
        if a > 0.0 && d_depth != 0.0 {
            g[CH_DEPTH] = d_depth / a;
            d_alpha[p] -= d_depth * raster.image[p * CHANNELS + CH_DEPTH] / (a * a);
        }
        if normal.pixel_mask[p] {
            g[CH_NORMAL] = m.normal;
        }
    }
    for i in 0..n {
        features[i * CHANNELS + CH_NORMAL] = normal.feature[i];
    }
    let grads = rasterize_backward(&geometry.splats(&features, CHANNELS), camera, &raster, &d_image, &d_alpha)?;
    let mut scene_grad = geometry_backward(scene, &grads);
    let depth_axis: Vector3<f64> = camera.rotation.row(2).transpose();

    let mut d_colors = vec![[0.0; 3]; n];
    for (i, dc) in d_colors.iter_mut().enumerate() {
        let f = &grads.features[i * CHANNELS..(i + 1) * CHANNELS];
        for c in 0..3 {
            dc[c] = f[CH_RGB + c] + if i < nf { f[CH_FG + c] } else { 0.0 };
        }
        let d_z = f[CH_DEPTH] + m.sky_depth * sky_depth.grad[i];
        if d_z != 0.0 {
            scene_grad.add_mean_gradient(scene, i, &(depth_axis * d_z));
        }
    }

    // Shading backward; per-Gaussian light gradients are summed in order.
    let fg_back: Vec<_> = (0..nf)
        .into_par_iter()
        .map(|i| {
            let mut d_light = [0.0; LIGHT_PARAMS];
            let d_n = normal.d_normals[i] * m.normal;
            let g = shade_foreground_backward(&fg_inputs[i], &ctx, &d_colors[i], &d_n, &mut d_light);
            (g, d_light)
        })
        .collect();
    let mut d_light = [0.0; LIGHT_PARAMS];
    for (k, v) in light_loss.grad.iter().enumerate() {
        d_light[k] = m.light * v;
    }
    for (i, (g, dl)) in fg_back.iter().enumerate() {
        for (a, b) in d_light.iter_mut().zip(dl) {
            *a += b;
        }
        let a = &mut scene_grad.foreground[i];
        for k in 0..3 {
            a[k] += g.position[k];
            a[7 + k] += m.scale * scale_grad[i][k];
            a[11 + k] += g.albedo[k];
        }
        for k in 0..4 {
            a[3 + k] += g.rotation[k];
        }
        a[14] += g.roughness;
    }
    let mut d_sky = [0.0; SKY_PARAMS];
    for (s, input) in sky_inputs.iter().enumerate() {
        let i = nf + s;
        let dp = shade_sky_backward(input, &sky, &d_colors[i], &mut d_sky);
        scene_grad.add_mean_gradient(scene, i, &Vector3::from(dp));
    }
    let mut d_mlp = vec![0.0; model.mlp.params.len()];
    let d_emb = model.mlp.backward(&cache, &d_light, &d_sky, &mut d_mlp);
    let mut d_embeddings = vec![0.0; model.embeddings.values.len()];
    let row = view.index * d_emb.len();
    d_embeddings[row..row + d_emb.len()].copy_from_slice(&d_emb);

    let half = [w as f64 * 0.5, h as f64 * 0.5];
    let ndc_gradients = grads.means2d.iter().map(|g| (g.x * half[0]).hypot(g.y * half[1])).collect();
    Ok(Evaluation {
        terms,
        total,
        grad: ModelGrad { scene: scene_grad, mlp: d_mlp, embeddings: d_embeddings },
        ndc_gradients,
        in_view: raster.projections.iter().map(Option::is_some).collect(),
        color,
        fg_leak: fg_sky.fg_leak,
    })
}
