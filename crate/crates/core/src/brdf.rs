//! Split-sum BRDF lookup table for a dielectric Cook-Torrance lobe.
//!
//! Each texel stores the Fresnel-split pair `(F1, F2)` with
//! `I_BRDF = F0·F1 + F2`, baked by GGX importance sampling with Smith
//! height-correlated masking-shadowing and the Schlick Fresnel term.
//! Axis 0 is `cos θ_v` over `[0, 1]`, axis 1 is roughness over `[RHO_MIN, 1]`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Lower clamp on roughness at bake and query time.
pub const RHO_MIN: f64 = 0.03;
/// Schlick base reflectivity of a dielectric.
pub const F0_DIELECTRIC: f64 = 0.04;
pub const DEFAULT_LUT_RESOLUTION: usize = 64;
pub const DEFAULT_LUT_SAMPLES: usize = 1024;
pub const DEFAULT_LUT_SEED: u64 = 0x5eed_b4df;
pub const MIN_LUT_RESOLUTION: usize = 16;
pub const MIN_LUT_SAMPLES: usize = 256;

/// `cos θ_v` used when baking the first column, where the integrand degenerates.
const BAKE_COS_EPS: f64 = 1e-4;
const MAGIC: &[u8; 8] = b"BRDFLUT1";

#[derive(Debug, Error)]
pub enum BrdfError {
    #[error("lut resolution {0} below minimum {MIN_LUT_RESOLUTION}")]
    Resolution(usize),
    #[error("samples per texel {0} below minimum {MIN_LUT_SAMPLES}")]
    Samples(usize),
    #[error("lut file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrdfLut {
    resolution: usize,
    /// `(F1, F2)` at index `i_cos * resolution + j_roughness`.
    grid: Vec<[f64; 2]>,
}

/// Interpolated LUT value and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutSample {
    pub f1: f64,
    pub f2: f64,
    pub d_roughness: [f64; 2],
    pub d_cos: [f64; 2],
}

impl LutSample {
    /// `F0·F1 + F2`.
    pub fn response(&self) -> f64 {
        F0_DIELECTRIC * self.f1 + self.f2
    }
    pub fn response_d_roughness(&self) -> f64 {
        F0_DIELECTRIC * self.d_roughness[0] + self.d_roughness[1]
    }
    pub fn response_d_cos(&self) -> f64 {
        F0_DIELECTRIC * self.d_cos[0] + self.d_cos[1]
    }
}

pub fn ggx_alpha(roughness: f64) -> f64 {
    roughness * roughness
}

fn smith_lambda(cos: f64, alpha: f64) -> f64 {
    let c2 = cos * cos;
    let tan2 = (1.0 - c2).max(0.0) / c2;
    0.5 * (-1.0 + (1.0 + alpha * alpha * tan2).sqrt())
}

/// Height-correlated Smith masking-shadowing `G2`.
pub fn smith_g2(n_dot_v: f64, n_dot_l: f64, alpha: f64) -> f64 {
    1.0 / (1.0 + smith_lambda(n_dot_v, alpha) + smith_lambda(n_dot_l, alpha))
}

fn radical_inverse(mut bits: u32) -> f64 {
    bits = bits.rotate_right(16);
    bits = ((bits & 0x5555_5555) << 1) | ((bits & 0xAAAA_AAAA) >> 1);
    bits = ((bits & 0x3333_3333) << 2) | ((bits & 0xCCCC_CCCC) >> 2);
    bits = ((bits & 0x0F0F_0F0F) << 4) | ((bits & 0xF0F0_F0F0) >> 4);
    bits = ((bits & 0x00FF_00FF) << 8) | ((bits & 0xFF00_FF00) >> 8);
    bits as f64 * (1.0 / 4_294_967_296.0)
}

/// Estimates `(F1, F2)` for one view angle and roughness by sampling the
/// GGX distribution of visible normals, so each sample weight is `G2 / G1 <= 1`.
fn integrate_texel(cos_v: f64, roughness: f64, samples: usize, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let alpha = ggx_alpha(roughness);
    let v = Vector3::new((1.0 - cos_v * cos_v).max(0.0).sqrt(), 0.0, cos_v);
    let g1_v = 1.0 / (1.0 + smith_lambda(cos_v, alpha));
    let vh = Vector3::new(alpha * v.x, alpha * v.y, v.z).normalize();
    let len_sq = vh.x * vh.x + vh.y * vh.y;
    let t1 = if len_sq > 0.0 {
        Vector3::new(-vh.y, vh.x, 0.0) / len_sq.sqrt()
    } else {
        Vector3::x()
    };
    let t2 = vh.cross(&t1);
    // Cranley-Patterson rotation of a Hammersley set.
    let shift: [f64; 2] = [rng.random(), rng.random()];
    let (mut f1, mut f2) = (0.0, 0.0);
    for k in 0..samples {
        let u1 = (k as f64 / samples as f64 + shift[0]).fract();
        let u2 = (radical_inverse(k as u32) + shift[1]).fract();
        let r = u1.sqrt();
        let phi = 2.0 * PI * u2;
        let p1 = r * phi.cos();
        let s = 0.5 * (1.0 + vh.z);
        let p2 = (1.0 - s) * (1.0 - p1 * p1).max(0.0).sqrt() + s * r * phi.sin();
        let nh = t1 * p1 + t2 * p2 + vh * (1.0 - p1 * p1 - p2 * p2).max(0.0).sqrt();
        let h = Vector3::new(alpha * nh.x, alpha * nh.y, nh.z.max(0.0)).normalize();
        let v_dot_h = v.dot(&h);
        let l_z = 2.0 * v_dot_h * h.z - v.z;
        if l_z <= 0.0 || v_dot_h <= 0.0 {
            continue;
        }
        let w = smith_g2(cos_v, l_z, alpha) / g1_v;
        let fc = (1.0 - v_dot_h).powi(5);
        f1 += (1.0 - fc) * w;
        f2 += fc * w;
    }
    [f1 / samples as f64, f2 / samples as f64]
}

/// Bakes the table; the result is a pure function of the arguments.
pub fn bake_lut(resolution: usize, samples_per_texel: usize, seed: u64) -> Result<BrdfLut, BrdfError> {
    if resolution < MIN_LUT_RESOLUTION {
        return Err(BrdfError::Resolution(resolution));
    }
    if samples_per_texel < MIN_LUT_SAMPLES {
        return Err(BrdfError::Samples(samples_per_texel));
    }
    let grid = (0..resolution * resolution)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / resolution, idx % resolution);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let cos_v = node_cos(resolution, i).max(BAKE_COS_EPS);
            integrate_texel(cos_v, node_roughness(resolution, j), samples_per_texel, &mut rng)
        })
        .collect();
    Ok(BrdfLut { resolution, grid })
}

/// Default table used by every render path.
pub fn default_lut() -> BrdfLut {
    bake_lut(DEFAULT_LUT_RESOLUTION, DEFAULT_LUT_SAMPLES, DEFAULT_LUT_SEED)
        .expect("default lut parameters are valid")
}

fn node_cos(resolution: usize, i: usize) -> f64 {
    i as f64 / (resolution - 1) as f64
}

fn node_roughness(resolution: usize, j: usize) -> f64 {
    RHO_MIN + (1.0 - RHO_MIN) * j as f64 / (resolution - 1) as f64
}

impl BrdfLut {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `cos θ_v` of grid column `i`.
    pub fn node_cos(&self, i: usize) -> f64 {
        node_cos(self.resolution, i)
    }

    /// Roughness of grid row `j`.
    pub fn node_roughness(&self, j: usize) -> f64 {
        node_roughness(self.resolution, j)
    }

    pub fn get(&self, i_cos: usize, j_roughness: usize) -> [f64; 2] {
        self.grid[i_cos * self.resolution + j_roughness]
    }

    pub fn entries(&self) -> &[[f64; 2]] {
        &self.grid
    }

    /// Bilinear lookup of `(F1, F2)`.
    pub fn sample(&self, roughness: f64, cos_theta: f64) -> (f64, f64) {
        let s = self.sample_with_gradient(roughness, cos_theta);
        (s.f1, s.f2)
    }

    /// Bilinear lookup with partial derivatives; zero slope where clamped.
    pub fn sample_with_gradient(&self, roughness: f64, cos_theta: f64) -> LutSample {
        let n = self.resolution;
        let scale = (n - 1) as f64;
        let (c, c_clamped) = clamp_flag(cos_theta, 0.0, 1.0);
        let (r, r_clamped) = clamp_flag(roughness, RHO_MIN, 1.0);
        let u = c * scale;
        let v = (r - RHO_MIN) / (1.0 - RHO_MIN) * scale;
        let i0 = (u.floor() as usize).min(n - 2);
        let j0 = (v.floor() as usize).min(n - 2);
        let tu = u - i0 as f64;
        let tv = v - j0 as f64;
        let f00 = self.get(i0, j0);
        let f01 = self.get(i0, j0 + 1);
        let f10 = self.get(i0 + 1, j0);
        let f11 = self.get(i0 + 1, j0 + 1);
        let mut out = LutSample {
            f1: 0.0,
            f2: 0.0,
            d_roughness: [0.0; 2],
            d_cos: [0.0; 2],
        };
        for k in 0..2 {
            let val = (1.0 - tu) * ((1.0 - tv) * f00[k] + tv * f01[k])
                + tu * ((1.0 - tv) * f10[k] + tv * f11[k]);
            if k == 0 {
                out.f1 = val;
            } else {
                out.f2 = val;
            }
            if !c_clamped {
                out.d_cos[k] =
                    scale * ((1.0 - tv) * (f10[k] - f00[k]) + tv * (f11[k] - f01[k]));
            }
            if !r_clamped {
                out.d_roughness[k] = scale / (1.0 - RHO_MIN)
                    * ((1.0 - tu) * (f01[k] - f00[k]) + tu * (f11[k] - f10[k]));
            }
        }
        out
    }

    /// Little-endian: magic, u32 resolution, row-major f32 `(F1, F2)` pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.grid.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        for [f1, f2] in &self.grid {
            out.extend_from_slice(&(*f1 as f32).to_le_bytes());
            out.extend_from_slice(&(*f2 as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BrdfError> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(BrdfError::Format("missing BRDFLUT1 header".into()));
        }
        let resolution = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if resolution < 2 {
            return Err(BrdfError::Format(format!("resolution {resolution}")));
        }
        let expected = 12 + resolution * resolution * 8;
        if bytes.len() != expected {
            return Err(BrdfError::Format(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let grid = bytes[12..]
            .chunks_exact(8)
            .map(|c| {
                let f1 = f32::from_le_bytes(c[..4].try_into().unwrap()) as f64;
                let f2 = f32::from_le_bytes(c[4..].try_into().unwrap()) as f64;
                [f1, f2]
            })
            .collect();
        Ok(Self { resolution, grid })
    }

    pub fn write(&self, path: &Path) -> Result<(), BrdfError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, BrdfError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn clamp_flag(x: f64, lo: f64, hi: f64) -> (f64, bool) {
    if x < lo {
        (lo, true)
    } else if x > hi {
        (hi, true)
    } else {
        (x, false)
    }
}
