//! Foreground and sky Gaussian banks, the sky dome, and initialization.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{self, inverse_sigmoid, rotation_matrix, sigmoid, Quat, IDENTITY_QUAT};
use crate::shading::Material;

pub const DEFAULT_SKY_COUNT_SCALE: f64 = 40.0;
pub const INITIAL_ROUGHNESS: f64 = 0.5;
pub const INITIAL_OPACITY: f64 = 0.1;
pub const SPLIT_SCALE_FACTOR: f64 = 1.6;
pub const MIN_DOME_RADIUS: f64 = 1e-6;
pub const THETA_MAX: f64 = FRAC_PI_2;
pub const PHI_MAX: f64 = PI;

/// Number of scalars in a flattened foreground Gaussian.
pub const FG_PARAMS: usize = 15;
/// Number of scalars in a flattened sky Gaussian.
pub const SKY_PARAMS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("point cloud has {0} points, at least 4 are required")]
    TooFewPoints(usize),
    #[error("{kind} gaussian {index} has a non-finite parameter")]
    NonFinite { kind: &'static str, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForegroundGaussian {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub log_scales: [f64; 3],
    pub opacity_logit: f64,
    pub material: Material,
}

impl ForegroundGaussian {
    pub fn scales(&self) -> [f64; 3] {
        self.log_scales.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        geometry::covariance(&self.rotation, &self.scales())
    }

    /// Layout: position(3), rotation(4), log-scales(3), opacity logit,
    /// albedo(3), roughness.
    pub fn to_array(&self) -> [f64; FG_PARAMS] {
        let p = &self.position;
        let q = &self.rotation;
        let s = &self.log_scales;
        let a = &self.material.albedo;
        [
            p.x,
            p.y,
            p.z,
            q[0],
            q[1],
            q[2],
            q[3],
            s[0],
            s[1],
            s[2],
            self.opacity_logit,
            a[0],
            a[1],
            a[2],
            self.material.roughness,
        ]
    }

    pub fn from_array(v: &[f64; FG_PARAMS]) -> Self {
        Self {
            position: Vector3::new(v[0], v[1], v[2]),
            rotation: [v[3], v[4], v[5], v[6]],
            log_scales: [v[7], v[8], v[9]],
            opacity_logit: v[10],
            material: Material { albedo: [v[11], v[12], v[13]], roughness: v[14] },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkyGaussian {
    /// Polar angle from +z.
    pub theta: f64,
    /// Azimuth from +x.
    pub phi: f64,
    pub rotation: Quat,
    pub log_scales: [f64; 3],
    pub opacity_logit: f64,
}

impl SkyGaussian {
    pub fn scales(&self) -> [f64; 3] {
        self.log_scales.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        geometry::covariance(&self.rotation, &self.scales())
    }

    /// Layout: theta, phi, rotation(4), log-scales(3), opacity logit.
    pub fn to_array(&self) -> [f64; SKY_PARAMS] {
        let q = &self.rotation;
        let s = &self.log_scales;
        [self.theta, self.phi, q[0], q[1], q[2], q[3], s[0], s[1], s[2], self.opacity_logit]
    }

    pub fn from_array(v: &[f64; SKY_PARAMS]) -> Self {
        Self {
            theta: v[0],
            phi: v[1],
            rotation: [v[2], v[3], v[4], v[5]],
            log_scales: [v[6], v[7], v[8]],
            opacity_logit: v[9],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkyDome {
    center: Vector3<f64>,
    pub radius: f64,
}

impl SkyDome {
    pub fn new(center: Vector3<f64>, radius: f64) -> Self {
        Self { center, radius: radius.max(MIN_DOME_RADIUS) }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }
}

/// Unit direction for polar angle `theta` and azimuth `phi` (z-up).
pub fn spherical_direction(theta: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

/// Derivatives of [`spherical_direction`] with respect to `theta` and `phi`.
pub fn spherical_direction_derivatives(theta: f64, phi: f64) -> (Vector3<f64>, Vector3<f64>) {
    let d_theta = Vector3::new(theta.cos() * phi.cos(), theta.cos() * phi.sin(), -theta.sin());
    let d_phi = Vector3::new(-theta.sin() * phi.sin(), theta.sin() * phi.cos(), 0.0);
    (d_theta, d_phi)
}

pub fn sky_position(g: &SkyGaussian, dome: &SkyDome) -> Vector3<f64> {
    dome.center + dome.radius * spherical_direction(g.theta, g.phi)
}

/// A seed point with a display-space color in `[0, 1]³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub foreground: Vec<ForegroundGaussian>,
    pub sky: Vec<SkyGaussian>,
    pub dome: SkyDome,
}

impl Scene {
    pub fn sky_positions(&self) -> Vec<Vector3<f64>> {
        self.sky.iter().map(|g| sky_position(g, &self.dome)).collect()
    }

    /// Projects every parameter back onto its feasible set.
    pub fn clamp_constraints(&mut self) {
        for g in &mut self.foreground {
            for a in &mut g.material.albedo {
                *a = a.clamp(0.0, 1.0);
            }
            g.material.roughness = g.material.roughness.clamp(0.0, 1.0);
        }
        for g in &mut self.sky {
            g.theta = g.theta.clamp(0.0, THETA_MAX);
            g.phi = g.phi.clamp(0.0, PHI_MAX);
        }
        self.dome.radius = self.dome.radius.max(MIN_DOME_RADIUS);
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (index, g) in self.foreground.iter().enumerate() {
            if !g.to_array().iter().all(|x| x.is_finite()) {
                return Err(SceneError::NonFinite { kind: "foreground", index });
            }
        }
        for (index, g) in self.sky.iter().enumerate() {
            if !g.to_array().iter().all(|x| x.is_finite()) {
                return Err(SceneError::NonFinite { kind: "sky", index });
            }
        }
        if !self.dome.radius.is_finite() {
            return Err(SceneError::NonFinite { kind: "dome", index: 0 });
        }
        Ok(())
    }
}

/// Value form of [`Scene::clamp_constraints`].
pub fn clamp_constraints(mut scene: Scene) -> Scene {
    scene.clamp_constraints();
    scene
}

/// `z ~ U[0,1]`, `θ = acos z`, `φ ~ U[0, π]`.
pub fn sample_sky_angles(rng: &mut impl Rng) -> (f64, f64) {
    let z: f64 = rng.random();
    let phi: f64 = rng.random::<f64>() * PHI_MAX;
    (z.acos(), phi)
}

/// Linear-interpolated percentile of unsorted data, `q` in `[0, 1]`.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn mean_knn_distance(points: &[SeedPoint], k: usize) -> Vec<f64> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = vec![f64::INFINITY; k];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p.position - q.position).norm_squared();
                if d < best[k - 1] {
                    best[k - 1] = d;
                    best.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            (found.iter().map(|d| d.sqrt()).sum::<f64>() / found.len() as f64).max(1e-7)
        })
        .collect()
}

pub fn init_scene(points: &[SeedPoint], sky_count_scale: f64, rng: &mut impl Rng) -> Result<Scene, SceneError> {
    if points.len() < 4 {
        return Err(SceneError::TooFewPoints(points.len()));
    }
    let mut lo = points[0].position;
    let mut hi = points[0].position;
    let mut centroid = Vector3::zeros();
    for p in points {
        lo = lo.inf(&p.position);
        hi = hi.sup(&p.position);
        centroid += p.position;
    }
    centroid /= points.len() as f64;
    let center = (lo + hi) * 0.5;
    let mut dists: Vec<f64> = points.iter().map(|p| (p.position - centroid).norm()).collect();
    let dome = SkyDome::new(center, percentile(&mut dists, 0.99));

    let knn = mean_knn_distance(points, 3);
    let opacity_logit = inverse_sigmoid(INITIAL_OPACITY);
    let foreground = points
        .iter()
        .zip(&knn)
        .map(|(p, &d)| ForegroundGaussian {
            position: p.position,
            rotation: IDENTITY_QUAT,
            log_scales: [d.ln(); 3],
            opacity_logit,
            material: Material {
                albedo: p.color.map(|c| c.clamp(0.0, 1.0).powf(crate::shading::GAMMA)),
                roughness: INITIAL_ROUGHNESS,
            },
        })
        .collect();

    let n_sky = (sky_count_scale * dome.radius).round().max(0.0) as usize;
    // Even coverage of the quarter sphere, whose area is π r².
    let sky_scale = if n_sky > 0 { 0.5 * (PI * dome.radius * dome.radius / n_sky as f64).sqrt() } else { 1.0 };
    let sky = (0..n_sky)
        .map(|_| {
            let (theta, phi) = sample_sky_angles(rng);
            SkyGaussian { theta, phi, rotation: IDENTITY_QUAT, log_scales: [sky_scale.ln(); 3], opacity_logit }
        })
        .collect();
    Ok(Scene { foreground, sky, dome })
}

/// Draws a point from the Gaussian density `N(mean, R S² Rᵀ)`.
fn sample_gaussian(mean: &Vector3<f64>, rotation: &Quat, scales: &[f64; 3], rng: &mut impl Rng) -> Vector3<f64> {
    let e = Vector3::new(
        rng.sample::<f64, _>(StandardNormal) * scales[0],
        rng.sample::<f64, _>(StandardNormal) * scales[1],
        rng.sample::<f64, _>(StandardNormal) * scales[2],
    );
    mean + rotation_matrix(rotation) * e
}

/// Spherical angles of a Cartesian point relative to the dome center,
/// clamped into the sky ranges. Azimuths past π snap to the nearer edge.
pub fn angles_on_dome(point: &Vector3<f64>, dome: &SkyDome) -> Option<(f64, f64)> {
    let d = point - dome.center;
    let n = d.norm();
    if n < 1e-12 {
        return None;
    }
    let u = d / n;
    let theta = u.z.clamp(-1.0, 1.0).acos().clamp(0.0, THETA_MAX);
    let mut phi = u.y.atan2(u.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    let phi = if phi <= PHI_MAX {
        phi
    } else if phi <= 1.5 * PI {
        PHI_MAX
    } else {
        0.0
    };
    Some((theta, phi))
}

/// Splits a sky Gaussian into two children sampled from its density and
/// projected back onto the dome.
pub fn split_sky_gaussian(g: &SkyGaussian, dome: &SkyDome, rng: &mut impl Rng) -> [SkyGaussian; 2] {
    let center = sky_position(g, dome);
    let scales = g.scales();
    let shrink = SPLIT_SCALE_FACTOR.ln();
    std::array::from_fn(|_| {
        let (theta, phi) = loop {
            let x = sample_gaussian(&center, &g.rotation, &scales, rng);
            if let Some(a) = angles_on_dome(&x, dome) {
                break a;
            }
        };
        SkyGaussian { theta, phi, log_scales: g.log_scales.map(|s| s - shrink), ..*g }
    })
}

/// Splits a foreground Gaussian into two children sampled from its density.
pub fn split_foreground_gaussian(g: &ForegroundGaussian, rng: &mut impl Rng) -> [ForegroundGaussian; 2] {
    let scales = g.scales();
    let shrink = SPLIT_SCALE_FACTOR.ln();
    std::array::from_fn(|_| ForegroundGaussian {
        position: sample_gaussian(&g.position, &g.rotation, &scales, rng),
        log_scales: g.log_scales.map(|s| s - shrink),
        ..*g
    })
}
