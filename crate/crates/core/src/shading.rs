//! Per-Gaussian physically based color: shortest-axis normals, irradiance
//! matrix diffuse, blurred-SH split-sum specular, and sky color.

use nalgebra::{Matrix3, Vector3};

use crate::brdf::BrdfLut;
use crate::geometry::{normalize_backward, rotation_matrix, rotation_matrix_backward, shortest_axis, Quat};
use crate::sh::{
    band_of, basis, basis_gradient, eval_sh, irradiance_coefficient_weights, irradiance_matrix, BlurExponent,
    IrradianceMatrix, ShCoefficients, ShError, UnitDirection, MAX_SH_COEFFS,
};

pub const GAMMA: f64 = 2.2;
pub const LIGHT_DEGREE: usize = 4;
pub const SKY_DEGREE: usize = 1;
/// Flattened light coefficient count (3 channels × 25).
pub const LIGHT_PARAMS: usize = 75;
/// Flattened sky coefficient count (3 channels × 4).
pub const SKY_PARAMS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    /// Linear-space albedo in `[0, 1]³`.
    pub albedo: [f64; 3],
    pub roughness: f64,
}

pub fn gamma_encode(x: f64) -> f64 {
    x.clamp(0.0, 1.0).powf(1.0 / GAMMA)
}

fn gamma_encode_derivative(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        x.powf(1.0 / GAMMA - 1.0) / GAMMA
    }
}

/// Shortest rotation axis, flipped to face `to_camera`.
pub fn gaussian_normal(rotation: &Quat, scales: &[f64; 3], to_camera: &UnitDirection) -> UnitDirection {
    let r = rotation_matrix(rotation);
    let n: Vector3<f64> = r.column(shortest_axis(scales)).into();
    let n = if n.dot(&to_camera.as_vector()) < 0.0 { -n } else { n };
    UnitDirection::new_unchecked(n)
}

/// Mirror of `view_dir` (surface → camera) about `normal`.
pub fn reflect(view_dir: &UnitDirection, normal: &UnitDirection) -> UnitDirection {
    let (w, n) = (view_dir.as_vector(), normal.as_vector());
    UnitDirection::new_unchecked((2.0 * w.dot(&n) * n - w).normalize())
}

pub fn diffuse_color(material: &Material, normal: &UnitDirection, m: &IrradianceMatrix) -> [f64; 3] {
    let q = m.quadratic_form(&normal.as_vector());
    std::array::from_fn(|c| material.albedo[c] / std::f64::consts::PI * q[c].max(0.0))
}

pub fn specular_color(
    material: &Material,
    normal: &UnitDirection,
    view_dir: &UnitDirection,
    light: &ShCoefficients,
    lut: &BrdfLut,
    blur: BlurExponent,
) -> Result<[f64; 3], ShError> {
    let blurred = crate::sh::sh_gaussian_blur(light, material.roughness, blur)?;
    let cos = normal.as_vector().dot(&view_dir.as_vector());
    if cos <= 0.0 {
        return Ok([0.0; 3]);
    }
    let radiance = eval_sh(&blurred, &reflect(view_dir, normal));
    let (f1, f2) = lut.sample(material.roughness, cos);
    let response = crate::brdf::F0_DIELECTRIC * f1 + f2;
    Ok(radiance.map(|l| l.max(0.0) * response))
}

/// Per-light data shared by every foreground Gaussian in one view.
#[derive(Debug, Clone)]
pub struct LightContext<'a> {
    pub light: &'a ShCoefficients,
    pub irradiance: IrradianceMatrix,
    pub lut: &'a BrdfLut,
    pub blur: BlurExponent,
}

impl<'a> LightContext<'a> {
    pub fn new(light: &'a ShCoefficients, lut: &'a BrdfLut, blur: BlurExponent) -> Result<Self, ShError> {
        if light.degree() != LIGHT_DEGREE {
            return Err(ShError::CoefficientCount {
                expected: crate::sh::num_coeffs(LIGHT_DEGREE),
                got: light.len_per_channel(),
            });
        }
        let irradiance = irradiance_matrix(&light.truncated(2)?)?;
        Ok(Self { light, irradiance, lut, blur })
    }
}

/// `gamma(clamp01(diffuse + specular))`.
pub fn foreground_color(
    material: &Material,
    normal: &UnitDirection,
    view_dir: &UnitDirection,
    ctx: &LightContext<'_>,
) -> Result<[f64; 3], ShError> {
    let d = diffuse_color(material, normal, &ctx.irradiance);
    let s = specular_color(material, normal, view_dir, ctx.light, ctx.lut, ctx.blur)?;
    Ok(std::array::from_fn(|c| gamma_encode(d[c] + s[c])))
}

/// Sky radiance along the viewing ray `view_dir` (camera → sky point),
/// clamped to `[0, 1]` without gamma.
pub fn sky_color(sky_sh: &ShCoefficients, view_dir: &UnitDirection) -> [f64; 3] {
    eval_sh(sky_sh, view_dir).map(|v| v.clamp(0.0, 1.0))
}

/// Inputs of the differentiable foreground shading path.
#[derive(Debug, Clone, Copy)]
pub struct ForegroundInput {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub log_scales: [f64; 3],
    pub material: Material,
    pub camera_center: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForegroundShade {
    pub color: [f64; 3],
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForegroundGrad {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub albedo: [f64; 3],
    pub roughness: f64,
}

struct FgForward {
    axis: usize,
    sign: f64,
    normal: Vector3<f64>,
    view: Vector3<f64>,
    dist: f64,
    cos: f64,
    reflected: Vector3<f64>,
    y_reflected: [f64; MAX_SH_COEFFS],
    band_gain: [f64; 5],
    specular_radiance: [f64; 3],
    response: f64,
    quad: [f64; 3],
    linear: [f64; 3],
    color: [f64; 3],
}

fn fg_forward(input: &ForegroundInput, ctx: &LightContext<'_>) -> FgForward {
    let rot = rotation_matrix(&input.rotation);
    let axis = shortest_axis(&input.log_scales);
    let to_cam = input.camera_center - input.position;
    let dist = to_cam.norm();
    let view = to_cam / dist;
    let col: Vector3<f64> = rot.column(axis).into();
    let sign = if col.dot(&view) < 0.0 { -1.0 } else { 1.0 };
    let normal = col * sign;
    let cos = normal.dot(&view);
    let reflected = 2.0 * cos * normal - view;
    let y_reflected = basis(&reflected);
    let rho = input.material.roughness;
    let band_gain: [f64; 5] = std::array::from_fn(|l| ctx.blur.band_multiplier(l, rho));
    let mut specular_radiance = [0.0; 3];
    for (c, s) in specular_radiance.iter_mut().enumerate() {
        let coeffs = ctx.light.channel(c);
        *s = (0..MAX_SH_COEFFS).map(|j| band_gain[band_of(j)] * coeffs[j] * y_reflected[j]).sum();
    }
    let response = if cos > 0.0 { ctx.lut.sample_with_gradient(rho, cos).response() } else { 0.0 };
    let quad = ctx.irradiance.quadratic_form(&normal);
    let mut linear = [0.0; 3];
    let mut color = [0.0; 3];
    for c in 0..3 {
        let diffuse = input.material.albedo[c] / std::f64::consts::PI * quad[c].max(0.0);
        linear[c] = diffuse + specular_radiance[c].max(0.0) * response;
        color[c] = gamma_encode(linear[c]);
    }
    FgForward {
        axis,
        sign,
        normal,
        view,
        dist,
        cos,
        reflected,
        y_reflected,
        band_gain,
        specular_radiance,
        response,
        quad,
        linear,
        color,
    }
}

pub fn shade_foreground(input: &ForegroundInput, ctx: &LightContext<'_>) -> ForegroundShade {
    let f = fg_forward(input, ctx);
    ForegroundShade { color: f.color, normal: f.normal }
}

/// Backward of [`shade_foreground`]. `d_normal` is an extra upstream gradient
/// on the returned normal. Light gradients accumulate into `d_light`
/// (channel-major, 25 per channel).
pub fn shade_foreground_backward(
    input: &ForegroundInput,
    ctx: &LightContext<'_>,
    d_color: &[f64; 3],
    d_normal: &Vector3<f64>,
    d_light: &mut [f64; LIGHT_PARAMS],
) -> ForegroundGrad {
    let f = fg_forward(input, ctx);
    let rho = input.material.roughness;
    let mut grad = ForegroundGrad::default();
    let mut g_n = *d_normal;
    let mut g_view = Vector3::zeros();
    let g_lin: [f64; 3] = std::array::from_fn(|c| d_color[c] * gamma_encode_derivative(f.linear[c]));

    // Diffuse.
    let q_grad = ctx.irradiance.quadratic_form_gradient(&f.normal);
    let irr_w = irradiance_coefficient_weights(&f.normal);
    for c in 0..3 {
        if g_lin[c] == 0.0 {
            continue;
        }
        grad.albedo[c] += g_lin[c] * f.quad[c].max(0.0) / std::f64::consts::PI;
        if f.quad[c] > 0.0 {
            let g_q = g_lin[c] * input.material.albedo[c] / std::f64::consts::PI;
            for j in 0..9 {
                d_light[c * MAX_SH_COEFFS + j] += g_q * irr_w[j];
            }
            g_n += g_q * q_grad[c];
        }
    }

    // Specular.
    if f.cos > 0.0 {
        let lut = ctx.lut.sample_with_gradient(rho, f.cos);
        let mut g_resp = 0.0;
        let mut g_refl = Vector3::zeros();
        let y_grad = basis_gradient(&f.reflected);
        let band_slope: [f64; 5] = std::array::from_fn(|l| ctx.blur.band_multiplier_derivative(l, rho));
        for c in 0..3 {
            if g_lin[c] == 0.0 {
                continue;
            }
            g_resp += g_lin[c] * f.specular_radiance[c].max(0.0);
            if f.specular_radiance[c] <= 0.0 {
                continue;
            }
            let g_s = g_lin[c] * f.response;
            let coeffs = ctx.light.channel(c);
            for j in 0..MAX_SH_COEFFS {
                let l = band_of(j);
                d_light[c * MAX_SH_COEFFS + j] += g_s * f.band_gain[l] * f.y_reflected[j];
                grad.roughness += g_s * band_slope[l] * coeffs[j] * f.y_reflected[j];
                let k = g_s * f.band_gain[l] * coeffs[j];
                g_refl += k * Vector3::from(y_grad[j]);
            }
        }
        grad.roughness += g_resp * lut.response_d_roughness();
        let g_cos = g_resp * lut.response_d_cos();
        // r = 2 (ω·n) n − ω
        let rn = g_refl.dot(&f.normal);
        g_n += 2.0 * rn * f.view + 2.0 * f.cos * g_refl;
        g_view += 2.0 * rn * f.normal - g_refl;
        g_n += g_cos * f.view;
        g_view += g_cos * f.normal;
    }

    // n = sign · R[:, axis]
    let mut d_rot = Matrix3::zeros();
    for i in 0..3 {
        d_rot[(i, f.axis)] = f.sign * g_n[i];
    }
    grad.rotation = rotation_matrix_backward(&input.rotation, &d_rot);
    // ω = (o − p)/|o − p|
    let d_to_cam = normalize_backward(&f.view, f.dist, &g_view);
    grad.position = [-d_to_cam.x, -d_to_cam.y, -d_to_cam.z];
    grad
}

/// Sky color and its backward, parameterized by world position.
#[derive(Debug, Clone, Copy)]
pub struct SkyInput {
    pub position: Vector3<f64>,
    pub camera_center: Vector3<f64>,
}

pub fn shade_sky(input: &SkyInput, sky: &ShCoefficients) -> [f64; 3] {
    let d = input.position - input.camera_center;
    sky_color(sky, &UnitDirection::new_unchecked(d / d.norm()))
}

/// Returns the position gradient; sky coefficient gradients accumulate into
/// `d_sky` (channel-major, 4 per channel).
pub fn shade_sky_backward(
    input: &SkyInput,
    sky: &ShCoefficients,
    d_color: &[f64; 3],
    d_sky: &mut [f64; SKY_PARAMS],
) -> [f64; 3] {
    let d = input.position - input.camera_center;
    let dist = d.norm();
    let v = d / dist;
    let y = basis(&v);
    let y_grad = basis_gradient(&v);
    let mut g_v = Vector3::zeros();
    for c in 0..3 {
        let coeffs = sky.channel(c);
        let s: f64 = (0..4).map(|j| coeffs[j] * y[j]).sum();
        if s <= 0.0 || s >= 1.0 || d_color[c] == 0.0 {
            continue;
        }
        for j in 0..4 {
            d_sky[c * 4 + j] += d_color[c] * y[j];
            g_v += d_color[c] * coeffs[j] * Vector3::from(y_grad[j]);
        }
    }
    let g = normalize_backward(&v, dist, &g_v);
    [g.x, g.y, g.z]
}
