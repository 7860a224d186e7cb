//! Synthetic relighting dataset: a textured wall of flat Gaussians in front
//! of an SH sky, photographed under several environment lights.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;

use crate::brdf::BrdfLut;
use crate::model::{shade_scene, ModelError, TrainingView};
use crate::raster::Camera;
use crate::render::{render, ColorMode};
use crate::scene::{ForegroundGaussian, Scene, SeedPoint, SkyDome};
use crate::sh::{eval_sh, project_to_sh, BlurExponent, ShCoefficients, ShSample, UnitDirection};
use crate::shading::{sky_color, Material};

/// Pixels whose ground-truth foreground alpha is below this are sky.
pub const SKY_ALPHA: f64 = 1e-3;
/// Pixels whose ground-truth foreground alpha reaches this are evaluated.
pub const EVAL_COVERAGE: f64 = 0.95;

const WALL_COLS: usize = 34;
const WALL_ROWS: usize = 12;
const WALL_SPACING: f64 = 0.2;
const WALL_TOP: f64 = 0.6;

/// Wall of `34 × 12` flat Gaussians on the plane `y = 0`, facing `−y`,
/// with a blocky albedo texture and varying roughness.
pub fn wall_scene(rng: &mut impl Rng) -> Scene {
    let palette = [[0.62, 0.3, 0.2], [0.25, 0.45, 0.6], [0.55, 0.55, 0.4], [0.3, 0.5, 0.3]];
    let mut foreground = Vec::with_capacity(WALL_COLS * WALL_ROWS);
    for r in 0..WALL_ROWS {
        for c in 0..WALL_COLS {
            let x = (c as f64 - (WALL_COLS - 1) as f64 / 2.0) * WALL_SPACING;
            let z = WALL_TOP - WALL_SPACING / 2.0 - r as f64 * WALL_SPACING;
            let base = palette[(c / 4 + r / 3) % palette.len()];
            let shade = 0.85 + 0.3 * rng.random::<f64>();
            foreground.push(ForegroundGaussian {
                position: Vector3::new(x, 0.0, z),
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scales: [(0.6 * WALL_SPACING).ln(), 0.005f64.ln(), (0.6 * WALL_SPACING).ln()],
                opacity_logit: crate::geometry::inverse_sigmoid(0.98),
                material: Material {
                    albedo: base.map(|a| (a * shade).min(0.8)),
                    roughness: 0.35 + 0.3 * c as f64 / (WALL_COLS - 1) as f64,
                },
            });
        }
    }
    Scene { foreground, sky: vec![], dome: SkyDome::new(Vector3::new(0.0, 0.0, -0.4), 2.5) }
}

/// Degree-4 projection of an ambient term plus a colored sun lobe
/// `max(0, ω·sun)^sharpness`, by midpoint quadrature.
pub fn sun_light(sun: &Vector3<f64>, sun_color: [f64; 3], ambient: [f64; 3], sharpness: i32) -> ShCoefficients {
    let sun = sun.normalize();
    let (nt, np) = (128, 256);
    let mut samples = Vec::with_capacity(nt * np);
    for i in 0..nt {
        let theta = PI * (i as f64 + 0.5) / nt as f64;
        for j in 0..np {
            let phi = 2.0 * PI * (j as f64 + 0.5) / np as f64;
            let d = UnitDirection::from_spherical(theta, phi);
            let lobe = d.as_vector().dot(&sun).max(0.0).powi(sharpness);
            samples.push(ShSample {
                direction: d,
                value: std::array::from_fn(|c| ambient[c] + sun_color[c] * lobe),
                weight: theta.sin() * (PI / nt as f64) * (2.0 * PI / np as f64),
            });
        }
    }
    project_to_sh(&samples, 4).expect("non-empty quadrature")
}

/// Degree-1 sky color: brighter toward the zenith.
pub fn sky_gradient(horizon: [f64; 3], zenith: [f64; 3]) -> ShCoefficients {
    // a + b·z has coefficients a·2√π on Y00 and b·2√(π/3) on Y10.
    let k0 = 2.0 * PI.sqrt();
    let k1 = 2.0 * (PI / 3.0).sqrt();
    let channels = std::array::from_fn(|c| vec![horizon[c] * k0, 0.0, (zenith[c] - horizon[c]) * k1, 0.0]);
    ShCoefficients::from_channels(1, channels).expect("degree 1")
}

/// Ground-truth image of `scene` under `light`, with the sky color filled in
/// behind the foreground. Returns the image and the foreground alpha.
pub fn render_ground_truth(
    scene: &Scene,
    camera: &Camera,
    light: &ShCoefficients,
    sky: Option<&ShCoefficients>,
    lut: &BrdfLut,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let white = ShCoefficients::constant(1, [1.0; 3])?;
    let colors = shade_scene(scene, camera, light, &white, lut, BlurExponent::default())?;
    let out = render(scene, camera, &colors, ColorMode::Full)?;
    let mut image = out.color;
    if let Some(sky) = sky {
        for y in 0..camera.height {
            for x in 0..camera.width {
                let p = y * camera.width + x;
                let ray = UnitDirection::normalize(camera.pixel_ray(x, y))?;
                let s = sky_color(sky, &ray);
                for c in 0..3 {
                    image[p * 3 + c] += (1.0 - out.alpha[p]) * s[c];
                }
            }
        }
    }
    Ok((image, out.alpha))
}

/// A fully specified relighting experiment.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub scene: Scene,
    pub train_lights: Vec<ShCoefficients>,
    pub train_skies: Vec<ShCoefficients>,
    pub test_light: ShCoefficients,
    pub views: Vec<TrainingView>,
    pub test_camera: Camera,
    pub points: Vec<SeedPoint>,
}

/// Camera on a circle of radius 3 around the wall center, `azimuth` radians
/// off the wall normal, looking at the wall.
fn wall_camera(azimuth: f64, z: f64, size: usize) -> Camera {
    Camera::look_at(
        Vector3::new(3.0 * azimuth.sin(), -3.0 * azimuth.cos(), z),
        Vector3::new(0.0, 0.0, 0.25),
        Vector3::z(),
        size as f64,
        size,
        size,
    )
    .expect("valid camera")
}

/// Three training lights with four views each, a held-out light and view,
/// and a seed point cloud colored from the first training image.
pub fn build(seed: u64, size: usize, lut: &BrdfLut) -> Result<SyntheticSet, ModelError> {
    let mut rng = crate::trainer::stream_rng(seed, 0, crate::trainer::Stream::Init);
    let scene = wall_scene(&mut rng);
    let train_lights = vec![
        sun_light(&Vector3::new(-0.6, -0.8, 0.25), [1.4, 1.2, 0.9], [0.35, 0.35, 0.4], 24),
        sun_light(&Vector3::new(0.7, -0.7, 0.15), [1.1, 0.9, 0.6], [0.4, 0.35, 0.3], 16),
        sun_light(&Vector3::new(0.1, -0.6, 0.8), [0.8, 0.9, 1.1], [0.45, 0.45, 0.5], 8),
    ];
    let train_skies = vec![
        sky_gradient([0.75, 0.8, 0.9], [0.35, 0.55, 0.9]),
        sky_gradient([0.9, 0.7, 0.5], [0.5, 0.5, 0.7]),
        sky_gradient([0.8, 0.8, 0.8], [0.6, 0.65, 0.7]),
    ];
    let test_light = sun_light(&Vector3::new(-0.3, -0.8, 0.5), [0.8, 0.7, 0.7], [0.5, 0.5, 0.45], 6);
    let offsets = [(-0.55, 0.1), (0.55, 0.25), (0.0, -0.05), (-0.3, 0.4)];
    let mut views = Vec::new();
    for (l, (light, sky)) in train_lights.iter().zip(&train_skies).enumerate() {
        for (k, (dx, dz)) in offsets.iter().enumerate() {
            let shift = 0.1 * l as f64;
            let camera = wall_camera(dx + 0.5 * shift - 0.05, dz + 0.5 * shift, size);
            let (image, alpha) = render_ground_truth(&scene, &camera, light, Some(sky), lut)?;
            let index = views.len();
            views.push(TrainingView {
                id: format!("light{l}_view{k}"),
                index,
                sky_mask: alpha.iter().map(|a| *a < SKY_ALPHA).collect(),
                occluder_mask: vec![false; camera.pixel_count()],
                image,
                camera,
            });
        }
    }
    let test_camera = wall_camera(0.2, 0.15, size);

    let first = &views[0];
    let points = scene
        .foreground
        .iter()
        .filter_map(|g| {
            let position = g.position + Vector3::from_fn(|_, _| 0.01 * rng.random_range(-1.0..1.0));
            let t = first.camera.to_camera(&position);
            let x = (first.camera.fx * t.x / t.z + first.camera.cx).floor();
            let y = (first.camera.fy * t.y / t.z + first.camera.cy).floor();
            if x < 0.0 || y < 0.0 || x >= size as f64 || y >= size as f64 {
                return None;
            }
            let p = y as usize * size + x as usize;
            Some(SeedPoint { position, color: std::array::from_fn(|c| first.image[p * 3 + c]) })
        })
        .collect();
    Ok(SyntheticSet { scene, train_lights, train_skies, test_light, views, test_camera, points })
}

/// Exclusion mask for evaluation: pixels not fully covered by the foreground.
pub fn evaluation_exclusion(foreground_alpha: &[f64]) -> Vec<bool> {
    foreground_alpha.iter().map(|a| *a < EVAL_COVERAGE).collect()
}

/// Radiance of a light along `dir`, for inspecting fixtures.
pub fn radiance(light: &ShCoefficients, dir: &Vector3<f64>) -> [f64; 3] {
    eval_sh(light, &UnitDirection::normalize(*dir).expect("non-zero direction"))
}

/// Writes the training images to `dir/train` and the held-out view to
/// `dir/test` (with its light as SH text and the evaluation mask as sky mask).
pub fn write_set(set: &SyntheticSet, dir: &std::path::Path, lut: &BrdfLut) -> Result<(), crate::pipeline::PipelineError> {
    crate::io::write_dataset(&dir.join("train"), &set.views, &set.points)?;
    let white = ShCoefficients::constant(1, [1.0; 3])?;
    let cam = set.test_camera;
    let (image, alpha) = render_ground_truth(&set.scene, &cam, &set.test_light, Some(&white), lut)?;
    let test = TrainingView {
        id: "test".into(),
        index: 0,
        camera: cam,
        image,
        sky_mask: evaluation_exclusion(&alpha),
        occluder_mask: vec![false; cam.pixel_count()],
    };
    let test_dir = dir.join("test");
    crate::io::write_dataset(&test_dir, std::slice::from_ref(&test), &[])?;
    crate::io::write_atomic(&test_dir.join("lights").join("test.txt"), set.test_light.to_text().as_bytes())?;
    Ok(())
}
