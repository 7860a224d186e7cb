//! Real spherical harmonics up to degree 4.
//!
//! Basis functions use the Condon-Shortley-free real convention with
//! band-major indexing `j = l(l+1) + m`. Directions are in a right-handed,
//! z-up frame.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix4, Vector3, Vector4};
use thiserror::Error;

/// Highest supported SH degree.
pub const MAX_SH_DEGREE: usize = 4;
/// Coefficients per channel at [`MAX_SH_DEGREE`].
pub const MAX_SH_COEFFS: usize = 25;

const UNIT_TOLERANCE: f64 = 1e-9;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const K2A: f64 = 1.092_548_430_592_079_2;
const K2B: f64 = 0.315_391_565_252_520_05;
const K2C: f64 = 0.546_274_215_296_039_6;
const K3A: f64 = 0.590_043_589_926_643_5;
const K3B: f64 = 2.890_611_442_640_554;
const K3C: f64 = 0.457_045_799_464_465_8;
const K3D: f64 = 0.373_176_332_590_115_4;
const K3E: f64 = 1.445_305_721_320_277;
const K4A: f64 = 2.503_342_941_796_704_6;
const K4B: f64 = 1.770_130_769_779_930_4;
const K4C: f64 = 0.946_174_695_757_560_1;
const K4D: f64 = 0.669_046_543_557_289_2;
const K4E: f64 = 0.105_785_546_915_204_31;
const K4F: f64 = 0.473_087_347_878_780_04;
const K4G: f64 = 0.625_835_735_449_176_1;

/// DC coefficient of a constant unit-radiance function, `2√π`.
pub const DC_UNIT_RADIANCE: f64 = 3.544_907_701_811_032;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShError {
    #[error("sh degree {0} exceeds the supported maximum of {MAX_SH_DEGREE}")]
    DegreeTooHigh(usize),
    #[error("direction ({0}, {1}, {2}) is not unit length")]
    NotUnit(f64, f64, f64),
    #[error("cannot normalize a zero-length direction")]
    ZeroDirection,
    #[error("expected {expected} coefficients per channel, got {got}")]
    CoefficientCount { expected: usize, got: usize },
    #[error("non-finite sh coefficient in channel {0}")]
    NonFinite(usize),
    #[error("sample list is empty")]
    EmptySamples,
    #[error("roughness {0} outside [0, 1]")]
    Roughness(f64),
    #[error("malformed sh text: {0}")]
    Parse(String),
}

/// Number of coefficients per channel for `degree`.
pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Band index `l` of flat coefficient index `j`.
pub fn band_of(j: usize) -> usize {
    let mut l = 0;
    while num_coeffs(l) <= j {
        l += 1;
    }
    l
}

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitDirection(Vector3<f64>);

impl UnitDirection {
    /// Accepts only vectors that are already unit length within 1e-9.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, ShError> {
        let n2 = x * x + y * y + z * z;
        if !n2.is_finite() || (n2 - 1.0).abs() > UNIT_TOLERANCE {
            return Err(ShError::NotUnit(x, y, z));
        }
        Ok(Self(Vector3::new(x, y, z)))
    }

    pub fn normalize(v: Vector3<f64>) -> Result<Self, ShError> {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(ShError::ZeroDirection);
        }
        Ok(Self(v / n))
    }

    /// Direction with polar angle `theta` from +z and azimuth `phi` from +x.
    pub fn from_spherical(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Self(Vector3::new(st * cp, st * sp, ct))
    }

    pub(crate) fn new_unchecked(v: Vector3<f64>) -> Self {
        Self(v)
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }
    pub fn y(&self) -> f64 {
        self.0.y
    }
    pub fn z(&self) -> f64 {
        self.0.z
    }
    pub fn as_vector(&self) -> Vector3<f64> {
        self.0
    }
}

/// Per-channel (RGB) real SH coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    degree: usize,
    coeffs: [Vec<f64>; 3],
}

impl ShCoefficients {
    pub fn zeros(degree: usize) -> Result<Self, ShError> {
        check_degree(degree)?;
        let n = num_coeffs(degree);
        Ok(Self {
            degree,
            coeffs: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        })
    }

    /// Light whose radiance is `rgb` in every direction.
    pub fn constant(degree: usize, rgb: [f64; 3]) -> Result<Self, ShError> {
        let mut out = Self::zeros(degree)?;
        for c in 0..3 {
            out.coeffs[c][0] = rgb[c] * DC_UNIT_RADIANCE;
        }
        Ok(out)
    }

    pub fn from_channels(degree: usize, coeffs: [Vec<f64>; 3]) -> Result<Self, ShError> {
        check_degree(degree)?;
        let expected = num_coeffs(degree);
        for (c, ch) in coeffs.iter().enumerate() {
            if ch.len() != expected {
                return Err(ShError::CoefficientCount {
                    expected,
                    got: ch.len(),
                });
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(ShError::NonFinite(c));
            }
        }
        Ok(Self { degree, coeffs })
    }

    /// Channel-interleaved-free flat layout: all of R, then G, then B.
    pub fn from_flat(degree: usize, flat: &[f64]) -> Result<Self, ShError> {
        let n = num_coeffs(degree);
        if flat.len() != 3 * n {
            return Err(ShError::CoefficientCount {
                expected: 3 * n,
                got: flat.len(),
            });
        }
        Self::from_channels(
            degree,
            [
                flat[..n].to_vec(),
                flat[n..2 * n].to_vec(),
                flat[2 * n..].to_vec(),
            ],
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.coeffs.concat()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len_per_channel(&self) -> usize {
        num_coeffs(self.degree)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.coeffs[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.coeffs[c]
    }

    /// Keeps bands `0..=degree`; padding with zeros when `degree` is larger.
    pub fn truncated(&self, degree: usize) -> Result<Self, ShError> {
        check_degree(degree)?;
        let n = num_coeffs(degree);
        let coeffs = self.coeffs.clone().map(|mut ch| {
            ch.resize(n, 0.0);
            ch
        });
        Ok(Self { degree, coeffs })
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let coeffs = self.coeffs.clone().map(|ch| ch.into_iter().map(|v| v * s).collect());
        Self {
            degree: self.degree,
            coeffs,
        }
    }

    /// `"sh degree L"` followed by one line of coefficients per channel.
    pub fn to_text(&self) -> String {
        let mut s = format!("sh degree {}\n", self.degree);
        for ch in &self.coeffs {
            let line: Vec<String> = ch.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ShError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| ShError::Parse("missing header".into()))?;
        let degree = header
            .strip_prefix("sh degree")
            .map(str::trim)
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| ShError::Parse(format!("bad header {header:?}")))?;
        check_degree(degree)?;
        let mut coeffs: [Vec<f64>; 3] = Default::default();
        for (c, slot) in coeffs.iter_mut().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| ShError::Parse(format!("missing channel {c}")))?;
            *slot = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| ShError::Parse(format!("channel {c}: {e}")))?;
        }
        Self::from_channels(degree, coeffs)
    }
}

fn check_degree(degree: usize) -> Result<(), ShError> {
    if degree > MAX_SH_DEGREE {
        Err(ShError::DegreeTooHigh(degree))
    } else {
        Ok(())
    }
}

/// All 25 basis values at `(x, y, z)`, which must lie on the unit sphere.
pub(crate) fn basis(v: &Vector3<f64>) -> [f64; MAX_SH_COEFFS] {
    let (x, y, z) = (v.x, v.y, v.z);
    let (x2, y2, z2) = (x * x, y * y, z * z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        K2A * x * y,
        K2A * y * z,
        K2B * (3.0 * z2 - 1.0),
        K2A * x * z,
        K2C * (x2 - y2),
        K3A * y * (3.0 * x2 - y2),
        K3B * x * y * z,
        K3C * y * (5.0 * z2 - 1.0),
        K3D * z * (5.0 * z2 - 3.0),
        K3C * x * (5.0 * z2 - 1.0),
        K3E * z * (x2 - y2),
        K3A * x * (x2 - 3.0 * y2),
        K4A * x * y * (x2 - y2),
        K4B * y * z * (3.0 * x2 - y2),
        K4C * x * y * (7.0 * z2 - 1.0),
        K4D * y * z * (7.0 * z2 - 3.0),
        K4E * (35.0 * z2 * z2 - 30.0 * z2 + 3.0),
        K4D * x * z * (7.0 * z2 - 3.0),
        K4F * (x2 - y2) * (7.0 * z2 - 1.0),
        K4B * x * z * (x2 - 3.0 * y2),
        K4G * (x2 * x2 - 6.0 * x2 * y2 + y2 * y2),
    ]
}

/// Gradients of the polynomial extension of each basis function.
///
/// Only the tangential part is meaningful; callers contract it with
/// perturbations that keep the direction on the sphere.
pub(crate) fn basis_gradient(v: &Vector3<f64>) -> [[f64; 3]; MAX_SH_COEFFS] {
    let (x, y, z) = (v.x, v.y, v.z);
    let (x2, y2, z2) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, C1, 0.0],
        [0.0, 0.0, C1],
        [C1, 0.0, 0.0],
        [K2A * y, K2A * x, 0.0],
        [0.0, K2A * z, K2A * y],
        [0.0, 0.0, 6.0 * K2B * z],
        [K2A * z, 0.0, K2A * x],
        [2.0 * K2C * x, -2.0 * K2C * y, 0.0],
        [6.0 * K3A * x * y, 3.0 * K3A * (x2 - y2), 0.0],
        [K3B * y * z, K3B * x * z, K3B * x * y],
        [0.0, K3C * (5.0 * z2 - 1.0), 10.0 * K3C * y * z],
        [0.0, 0.0, K3D * (15.0 * z2 - 3.0)],
        [K3C * (5.0 * z2 - 1.0), 0.0, 10.0 * K3C * x * z],
        [2.0 * K3E * x * z, -2.0 * K3E * y * z, K3E * (x2 - y2)],
        [3.0 * K3A * (x2 - y2), -6.0 * K3A * x * y, 0.0],
        [K4A * (3.0 * x2 * y - y2 * y), K4A * (x2 * x - 3.0 * x * y2), 0.0],
        [
            6.0 * K4B * x * y * z,
            3.0 * K4B * z * (x2 - y2),
            K4B * y * (3.0 * x2 - y2),
        ],
        [
            K4C * y * (7.0 * z2 - 1.0),
            K4C * x * (7.0 * z2 - 1.0),
            14.0 * K4C * x * y * z,
        ],
        [0.0, K4D * z * (7.0 * z2 - 3.0), K4D * y * (21.0 * z2 - 3.0)],
        [0.0, 0.0, K4E * (140.0 * z2 * z - 60.0 * z)],
        [K4D * z * (7.0 * z2 - 3.0), 0.0, K4D * x * (21.0 * z2 - 3.0)],
        [
            2.0 * K4F * x * (7.0 * z2 - 1.0),
            -2.0 * K4F * y * (7.0 * z2 - 1.0),
            14.0 * K4F * z * (x2 - y2),
        ],
        [
            3.0 * K4B * z * (x2 - y2),
            -6.0 * K4B * x * y * z,
            K4B * x * (x2 - 3.0 * y2),
        ],
        [
            4.0 * K4G * (x2 * x - 3.0 * x * y2),
            4.0 * K4G * (y2 * y - 3.0 * x2 * y),
            0.0,
        ],
    ]
}

/// Real SH basis values `Y_j(dir)` for `j < (degree+1)²`.
pub fn eval_sh_basis(dir: &UnitDirection, degree: usize) -> Result<Vec<f64>, ShError> {
    check_degree(degree)?;
    // Re-check: a UnitDirection may have been built from spherical angles.
    UnitDirection::new(dir.x(), dir.y(), dir.z())?;
    Ok(basis(&dir.0)[..num_coeffs(degree)].to_vec())
}

/// Per-channel dot product of coefficients with the basis. Unclamped.
pub fn eval_sh(light: &ShCoefficients, dir: &UnitDirection) -> [f64; 3] {
    let y = basis(&dir.0);
    eval_with_basis(light, &y)
}

pub(crate) fn eval_with_basis(light: &ShCoefficients, y: &[f64; MAX_SH_COEFFS]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = light.coeffs[c].iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    }
    out
}

/// One weighted radiance sample for [`project_to_sh`].
#[derive(Debug, Clone, Copy)]
pub struct ShSample {
    pub direction: UnitDirection,
    pub value: [f64; 3],
    /// Solid angle represented by the sample (sr).
    pub weight: f64,
}

/// Quadrature projection `c_j = Σ_k w_k v_k Y_j(d_k)`.
pub fn project_to_sh(samples: &[ShSample], degree: usize) -> Result<ShCoefficients, ShError> {
    check_degree(degree)?;
    if samples.is_empty() {
        return Err(ShError::EmptySamples);
    }
    let n = num_coeffs(degree);
    let mut out = ShCoefficients::zeros(degree)?;
    for s in samples {
        let y = basis(&s.direction.0);
        for c in 0..3 {
            let wv = s.weight * s.value[c];
            for j in 0..n {
                out.coeffs[c][j] += wv * y[j];
            }
        }
    }
    Ok(out)
}

/// How roughness maps to the zonal Gaussian filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurExponent {
    /// Blur strength `s = ρ²`, band multiplier `exp(-l(l+1)s²) = exp(-l(l+1)ρ⁴)`.
    #[default]
    RoughnessSquared,
    /// Band multiplier `exp(-l(l+1)ρ²)`.
    Roughness,
}

impl BlurExponent {
    /// Blur strength `s` for a roughness value.
    pub fn strength(self, roughness: f64) -> f64 {
        match self {
            BlurExponent::RoughnessSquared => roughness * roughness,
            BlurExponent::Roughness => roughness,
        }
    }

    /// `exp(-l(l+1)s²)`.
    pub fn band_multiplier(self, band: usize, roughness: f64) -> f64 {
        let s = self.strength(roughness);
        (-((band * (band + 1)) as f64) * s * s).exp()
    }

    /// d/dρ of [`Self::band_multiplier`].
    pub fn band_multiplier_derivative(self, band: usize, roughness: f64) -> f64 {
        let ll = (band * (band + 1)) as f64;
        let g = self.band_multiplier(band, roughness);
        match self {
            BlurExponent::RoughnessSquared => -4.0 * ll * roughness.powi(3) * g,
            BlurExponent::Roughness => -2.0 * ll * roughness * g,
        }
    }
}

/// Zonal Gaussian low-pass filter applied per band.
pub fn sh_gaussian_blur(
    light: &ShCoefficients,
    roughness: f64,
    exponent: BlurExponent,
) -> Result<ShCoefficients, ShError> {
    if !(0.0..=1.0).contains(&roughness) {
        return Err(ShError::Roughness(roughness));
    }
    let mut out = light.clone();
    for l in 1..=light.degree {
        let g = exponent.band_multiplier(l, roughness);
        for c in 0..3 {
            for j in num_coeffs(l - 1)..num_coeffs(l) {
                out.coeffs[c][j] *= g;
            }
        }
    }
    Ok(out)
}

/// Clamped-cosine convolution constants `Â_l` for bands 0..=2.
pub const COSINE_LOBE: [f64; 3] = [PI, 2.0 * PI / 3.0, PI / 4.0];

/// Per-channel symmetric 4×4 matrix whose quadratic form in the homogeneous
/// normal `(n, 1)` is the irradiance of a degree-2 light.
#[derive(Debug, Clone, PartialEq)]
pub struct IrradianceMatrix {
    pub channels: [Matrix4<f64>; 3],
}

impl IrradianceMatrix {
    /// `(n,1)ᵀ M (n,1)` per channel.
    pub fn quadratic_form(&self, n: &Vector3<f64>) -> [f64; 3] {
        let h = Vector4::new(n.x, n.y, n.z, 1.0);
        [0, 1, 2].map(|c| h.dot(&(self.channels[c] * h)))
    }

    /// Gradient of the quadratic form w.r.t. the normal's xyz, per channel.
    pub fn quadratic_form_gradient(&self, n: &Vector3<f64>) -> [Vector3<f64>; 3] {
        let h = Vector4::new(n.x, n.y, n.z, 1.0);
        [0, 1, 2].map(|c| {
            let mh = self.channels[c] * h;
            Vector3::new(2.0 * mh.x, 2.0 * mh.y, 2.0 * mh.z)
        })
    }
}

/// Builds the irradiance matrix from a degree-2 light.
pub fn irradiance_matrix(light_deg2: &ShCoefficients) -> Result<IrradianceMatrix, ShError> {
    if light_deg2.degree != 2 {
        return Err(ShError::CoefficientCount {
            expected: 9,
            got: light_deg2.len_per_channel(),
        });
    }
    let a0 = COSINE_LOBE[0];
    let a1 = COSINE_LOBE[1];
    let a2 = COSINE_LOBE[2];
    // Each polynomial term of E(n) = Σ Â_l L_lm Y_lm(n) distributed over
    // the symmetric entries; off-diagonal entries carry half the cross term.
    let c1 = a2 * K2A / 2.0;
    let c2 = a1 * C1 / 2.0;
    let c3 = a2 * 3.0 * K2B;
    let c4 = a0 * C0;
    let c5 = a2 * K2B;
    let c22 = a2 * K2C;
    let channels = [0, 1, 2].map(|c| {
        let l = &light_deg2.coeffs[c];
        Matrix4::new(
            c22 * l[8], c1 * l[4], c1 * l[7], c2 * l[3],
            c1 * l[4], -c22 * l[8], c1 * l[5], c2 * l[1],
            c1 * l[7], c1 * l[5], c3 * l[6], c2 * l[2],
            c2 * l[3], c2 * l[1], c2 * l[2], c4 * l[0] - c5 * l[6],
        )
    });
    Ok(IrradianceMatrix { channels })
}

/// `Â_l Y_j(n)` for j < 9: the derivative of the irradiance at `n` with
/// respect to each degree-2 light coefficient.
pub(crate) fn irradiance_coefficient_weights(n: &Vector3<f64>) -> [f64; 9] {
    let y = basis(n);
    let mut w = [0.0; 9];
    for (j, wj) in w.iter_mut().enumerate() {
        *wj = COSINE_LOBE[band_of(j)] * y[j];
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn degree_zero_basis_is_constant() {
        let d = UnitDirection::new(0.6, 0.0, 0.8).unwrap();
        let y = eval_sh_basis(&d, 0).unwrap();
        assert_eq!(y.len(), 1);
        assert_relative_eq!(y[0], 0.282_094_8, epsilon = 1e-7);
    }

    #[test]
    fn band_one_at_zenith() {
        let d = UnitDirection::new(0.0, 0.0, 1.0).unwrap();
        let y = eval_sh_basis(&d, 1).unwrap();
        assert_relative_eq!(y[1], 0.0);
        assert_relative_eq!(y[2], 0.488_602_5, epsilon = 1e-7);
        assert_relative_eq!(y[3], 0.0);
    }

    #[test]
    fn basis_rejects_bad_inputs() {
        let d = UnitDirection::new(0.0, 0.0, 1.0).unwrap();
        assert_eq!(eval_sh_basis(&d, 5), Err(ShError::DegreeTooHigh(5)));
        assert!(UnitDirection::new(1.0, 1.0, 0.0).is_err());
        assert!(UnitDirection::normalize(Vector3::zeros()).is_err());
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let v = Vector3::new(0.3, -0.5, 0.7);
        let g = basis_gradient(&v);
        let h = 1e-6;
        for k in 0..3 {
            let mut vp = v;
            let mut vm = v;
            vp[k] += h;
            vm[k] -= h;
            let (bp, bm) = (basis(&vp), basis(&vm));
            for j in 0..MAX_SH_COEFFS {
                let fd = (bp[j] - bm[j]) / (2.0 * h);
                assert!((fd - g[j][k]).abs() < 1e-7, "j={j} k={k}: {fd} vs {}", g[j][k]);
            }
        }
    }

    #[test]
    fn blur_identity_at_zero_roughness_and_dc_untouched() {
        let mut light = ShCoefficients::zeros(4).unwrap();
        for c in 0..3 {
            for (j, v) in light.channel_mut(c).iter_mut().enumerate() {
                *v = (j as f64 + 1.0) * (c as f64 + 0.5);
            }
        }
        let same = sh_gaussian_blur(&light, 0.0, BlurExponent::default()).unwrap();
        assert_eq!(same, light);
        let blurred = sh_gaussian_blur(&light, 0.8, BlurExponent::default()).unwrap();
        for c in 0..3 {
            assert_eq!(blurred.channel(c)[0], light.channel(c)[0]);
        }
        assert!(sh_gaussian_blur(&light, 1.5, BlurExponent::default()).is_err());
    }

    #[test]
    fn blur_band_two_multiplier() {
        // s = 0.5 under the s = ρ² mapping means ρ = √0.5.
        let g = BlurExponent::RoughnessSquared.band_multiplier(2, 0.5f64.sqrt());
        assert_relative_eq!(g, (-1.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(g, 0.22313, epsilon = 1e-5);
        let g = BlurExponent::Roughness.band_multiplier(2, 0.5);
        assert_relative_eq!(g, (-1.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn blur_multiplier_derivative() {
        for mode in [BlurExponent::RoughnessSquared, BlurExponent::Roughness] {
            for l in 0..=4 {
                let r = 0.37;
                let h = 1e-6;
                let fd = (mode.band_multiplier(l, r + h) - mode.band_multiplier(l, r - h)) / (2.0 * h);
                assert!((fd - mode.band_multiplier_derivative(l, r)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_light_irradiance_is_pi() {
        let light = ShCoefficients::constant(2, [1.0; 3]).unwrap();
        let m = irradiance_matrix(&light).unwrap();
        for n in [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.48, -0.6, 0.64),
        ] {
            for e in m.quadratic_form(&n) {
                assert_relative_eq!(e, PI, epsilon = 1e-12);
            }
        }
        let zero = irradiance_matrix(&ShCoefficients::zeros(2).unwrap()).unwrap();
        assert_eq!(zero.channels[0], Matrix4::zeros());
        assert!(irradiance_matrix(&ShCoefficients::zeros(4).unwrap()).is_err());
    }

    #[test]
    fn matrix_form_equals_weighted_basis_form() {
        let mut light = ShCoefficients::zeros(2).unwrap();
        for c in 0..3 {
            for (j, v) in light.channel_mut(c).iter_mut().enumerate() {
                *v = ((j * 7 + c * 3) as f64).sin();
            }
        }
        let m = irradiance_matrix(&light).unwrap();
        let n = Vector3::new(0.2, 0.4, -0.8).normalize();
        let w = irradiance_coefficient_weights(&n);
        let q = m.quadratic_form(&n);
        for c in 0..3 {
            let direct: f64 = light.channel(c).iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            assert_relative_eq!(q[c], direct, epsilon = 1e-12);
            assert_relative_eq!(m.channels[c], m.channels[c].transpose(), epsilon = 1e-12);
        }
    }

    #[test]
    fn eval_constant_and_zero() {
        let d = UnitDirection::from_spherical(1.1, 2.3);
        let one = ShCoefficients::constant(4, [1.0; 3]).unwrap();
        for v in eval_sh(&one, &d) {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
        assert_eq!(eval_sh(&ShCoefficients::zeros(4).unwrap(), &d), [0.0; 3]);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut light = ShCoefficients::zeros(4).unwrap();
        for (j, v) in light.channel_mut(1).iter_mut().enumerate() {
            *v = 1.0 / (j as f64 + 3.0);
        }
        let parsed = ShCoefficients::from_text(&light.to_text()).unwrap();
        assert_eq!(parsed, light);
        assert!(ShCoefficients::from_text("sh degree 1\n1 2 3 4\n1 2 3 4\n").is_err());
        assert!(ShCoefficients::from_text("sh degree 1\n1 2 3\n1 2 3 4\n1 2 3 4\n").is_err());
    }

    #[test]
    fn band_indexing() {
        assert_eq!(band_of(0), 0);
        assert_eq!(band_of(3), 1);
        assert_eq!(band_of(4), 2);
        assert_eq!(band_of(24), 4);
    }
}
