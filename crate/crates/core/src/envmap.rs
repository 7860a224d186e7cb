//! Equirectangular environment maps: loading, SH projection, rotation and
//! SH reconstruction.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Rotation3, Unit, Vector3};
use rayon::prelude::*;

use crate::io::{self, IoError, RgbBuffer};
use crate::sh::{eval_sh, project_to_sh, ShCoefficients, ShError, ShSample, UnitDirection};
use crate::shading::gamma_encode;

/// Linear radiance on a latitude-longitude grid. Texel `(u, v)` sits at
/// `φ = 2π(u + ½)/W` and `θ = π(v + ½)/H`, with the top row at the zenith.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationAxis {
    X,
    #[default]
    Y,
    Z,
}

impl RotationAxis {
    fn vector(self) -> Vector3<f64> {
        match self {
            RotationAxis::X => Vector3::x(),
            RotationAxis::Y => Vector3::y(),
            RotationAxis::Z => Vector3::z(),
        }
    }
}

impl std::str::FromStr for RotationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x" | "X" => Ok(Self::X),
            "y" | "Y" => Ok(Self::Y),
            "z" | "Z" => Ok(Self::Z),
            _ => Err(format!("unknown rotation axis {s:?}, expected x, y or z")),
        }
    }
}

impl EquirectMap {
    /// Map with every texel set to `value`.
    pub fn constant(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self { width, height, data: value.repeat(width * height) }
    }

    /// Samples `f(θ, φ)` at texel centers.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> [f64; 3] + Sync) -> Self {
        let data = (0..width * height)
            .into_par_iter()
            .flat_map_iter(|i| {
                let (u, v) = (i % width, i / width);
                f(Self::theta_at(v, height), Self::phi_at(u, width))
            })
            .collect();
        Self { width, height, data }
    }

    fn theta_at(v: usize, height: usize) -> f64 {
        PI * (v as f64 + 0.5) / height as f64
    }

    fn phi_at(u: usize, width: usize) -> f64 {
        2.0 * PI * (u as f64 + 0.5) / width as f64
    }

    pub fn texel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Solid angle of a texel in row `v`.
    pub fn solid_angle(&self, v: usize) -> f64 {
        Self::theta_at(v, self.height).sin() * (2.0 * PI / self.width as f64) * (PI / self.height as f64)
    }

    /// Solid-angle-weighted mean radiance per channel.
    pub fn mean(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut area = 0.0;
        for v in 0..self.height {
            let w = self.solid_angle(v);
            for u in 0..self.width {
                let t = self.texel(u, v);
                for c in 0..3 {
                    sum[c] += w * t[c];
                }
                area += w;
            }
        }
        sum.map(|s| s / area)
    }

    /// Linear interpolation along row `v`, which may be one past either pole:
    /// such a row is the edge row seen from the opposite azimuth.
    fn sample_row(&self, v: i64, fu: f64) -> [f64; 3] {
        let h = self.height as i64;
        let (row, fu) = if v < 0 {
            (0, fu + self.width as f64 / 2.0)
        } else if v >= h {
            (h - 1, fu + self.width as f64 / 2.0)
        } else {
            (v, fu)
        };
        let u0 = fu.floor();
        let t = fu - u0;
        let w = self.width as i64;
        let a = self.texel((u0 as i64).rem_euclid(w) as usize, row as usize);
        let b = self.texel((u0 as i64 + 1).rem_euclid(w) as usize, row as usize);
        std::array::from_fn(|k| (1.0 - t) * a[k] + t * b[k])
    }

    /// Bilinear lookup in direction `d`. Azimuth wraps, and near the poles
    /// interpolation continues across the pole.
    pub fn sample(&self, d: &Vector3<f64>) -> [f64; 3] {
        let d = d.normalize();
        let theta = d.z.clamp(-1.0, 1.0).acos();
        let phi = d.y.atan2(d.x).rem_euclid(2.0 * PI);
        let fu = phi * self.width as f64 / (2.0 * PI) - 0.5;
        let fv = theta * self.height as f64 / PI - 0.5;
        let v0 = fv.floor();
        let tv = fv - v0;
        let (a, b) = (self.sample_row(v0 as i64, fu), self.sample_row(v0 as i64 + 1, fu));
        std::array::from_fn(|k| (1.0 - tv) * a[k] + tv * b[k])
    }
}

/// Reads a PFM (linear) or 8-bit PNG (decoded with `v^2.2`). Negative
/// radiance is clamped to zero.
pub fn load_map(path: &Path) -> Result<EquirectMap, IoError> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let buf = match ext.as_deref() {
        Some("pfm") => io::read_pfm(path)?,
        Some("png") => {
            let mut b = io::read_png(path)?;
            b.data.iter_mut().for_each(|v| *v = io::linearize(*v));
            b
        }
        _ => {
            return Err(IoError::Format {
                path: path.to_path_buf(),
                msg: "unsupported environment map format, expected .pfm or .png".into(),
            })
        }
    };
    if buf.data.iter().any(|v| !v.is_finite()) {
        return Err(IoError::Format { path: path.to_path_buf(), msg: "non-finite radiance".into() });
    }
    Ok(EquirectMap { width: buf.width, height: buf.height, data: buf.data.into_iter().map(|v| v.max(0.0)).collect() })
}

/// Writes a PFM, or a gamma-encoded PNG when the extension is `.png`.
pub fn save_map(path: &Path, map: &EquirectMap) -> Result<(), IoError> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => {
            let data = map.data.iter().map(|v| gamma_encode(*v)).collect();
            io::write_png(path, &RgbBuffer::new(map.width, map.height, data))
        }
        _ => io::write_pfm(path, &RgbBuffer::new(map.width, map.height, map.data.clone())),
    }
}

pub fn map_to_sh(map: &EquirectMap, degree: usize) -> Result<ShCoefficients, ShError> {
    let mut samples = Vec::with_capacity(map.width * map.height);
    for v in 0..map.height {
        let theta = EquirectMap::theta_at(v, map.height);
        let weight = map.solid_angle(v);
        for u in 0..map.width {
            samples.push(ShSample {
                direction: UnitDirection::from_spherical(theta, EquirectMap::phi_at(u, map.width)),
                value: map.texel(u, v),
                weight,
            });
        }
    }
    project_to_sh(&samples, degree)
}

/// Rotates the environment by `angle` radians about `axis`: each output texel
/// looks up the source map through the inverse rotation.
pub fn rotate_map(map: &EquirectMap, angle: f64, axis: RotationAxis) -> EquirectMap {
    if angle == 0.0 {
        return map.clone();
    }
    let inverse = Rotation3::from_axis_angle(&Unit::new_normalize(axis.vector()), -angle);
    EquirectMap::from_fn(map.width, map.height, |theta, phi| {
        let d = UnitDirection::from_spherical(theta, phi);
        map.sample(&(inverse * d.as_vector()))
    })
}

/// Evaluates `coeffs` at every texel, clamping negatives for display.
pub fn sh_to_map(coeffs: &ShCoefficients, width: usize, height: usize) -> EquirectMap {
    EquirectMap::from_fn(width, height, |theta, phi| {
        eval_sh(coeffs, &UnitDirection::from_spherical(theta, phi)).map(|v| v.max(0.0))
    })
}
