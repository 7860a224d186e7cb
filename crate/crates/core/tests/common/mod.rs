//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatlight::geometry::inverse_sigmoid;
use splatlight::raster::Camera;
use splatlight::scene::{ForegroundGaussian, Scene, SkyDome, SkyGaussian};
use splatlight::shading::Material;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Associated Legendre `P_l^m(x)` for `m >= 0`, without the Condon-Shortley phase.
pub fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let mut pmm = 1.0;
    let s = (1.0 - x * x).max(0.0).sqrt();
    for i in 0..m {
        pmm *= (2 * i + 1) as f64 * s;
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut p = 0.0;
    for ll in (m + 2)..=l {
        p = ((2 * ll - 1) as f64 * x * pm1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pm1;
        pm1 = p;
    }
    p
}

/// Real spherical harmonic `Y_l^m` from spherical angles.
pub fn sh_reference(l: usize, m: i64, theta: f64, phi: f64) -> f64 {
    let am = m.unsigned_abs() as usize;
    let k = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - am) / factorial(l + am)).sqrt();
    let p = legendre(l, am, theta.cos());
    match m {
        0 => k * p,
        m if m > 0 => 2f64.sqrt() * k * p * (am as f64 * phi).cos(),
        _ => 2f64.sqrt() * k * p * (am as f64 * phi).sin(),
    }
}

pub fn to_spherical(d: &Vector3<f64>) -> (f64, f64) {
    (d.z.clamp(-1.0, 1.0).acos(), d.y.atan2(d.x))
}

/// All 25 reference basis values in band-major order.
pub fn sh_reference_all(d: &Vector3<f64>) -> Vec<f64> {
    let (theta, phi) = to_spherical(d);
    let mut out = Vec::with_capacity(25);
    for l in 0..=4usize {
        for m in -(l as i64)..=(l as i64) {
            out.push(sh_reference(l, m, theta, phi));
        }
    }
    out
}

pub fn uniform_sphere(rng: &mut impl Rng) -> Vector3<f64> {
    let z: f64 = 2.0 * rng.random::<f64>() - 1.0;
    let phi = 2.0 * PI * rng.random::<f64>();
    let r = (1.0 - z * z).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// `n` stratified uniform sphere samples (jittered in `(z, φ)` strata).
pub fn stratified_sphere(n_side: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(n_side * n_side);
    for i in 0..n_side {
        for j in 0..n_side {
            let z = 2.0 * (i as f64 + rng.random::<f64>()) / n_side as f64 - 1.0;
            let phi = 2.0 * PI * (j as f64 + rng.random::<f64>()) / n_side as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            out.push(Vector3::new(r * phi.cos(), r * phi.sin(), z));
        }
    }
    out
}

/// Orthonormal frame whose third axis is `n`.
pub fn frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t = n.cross(&a).normalize();
    (t, n.cross(&t))
}

/// Monte-Carlo `∫_{n·ω>0} L(ω) (n·ω) dω` with cosine-weighted sampling.
pub fn mc_irradiance(
    radiance: impl Fn(&Vector3<f64>) -> f64,
    n: &Vector3<f64>,
    samples: usize,
    rng: &mut impl Rng,
) -> f64 {
    let (t, b) = frame(n);
    let mut acc = 0.0;
    for _ in 0..samples {
        let r = rng.random::<f64>().sqrt();
        let phi = 2.0 * PI * rng.random::<f64>();
        let z = (1.0 - r * r).max(0.0).sqrt();
        let w = t * (r * phi.cos()) + b * (r * phi.sin()) + n * z;
        acc += radiance(&w);
    }
    // pdf = cos/π, so the estimator is π·mean(L).
    PI * acc / samples as f64
}

fn ggx_d(n_dot_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

fn g1_lambda(cos: f64, alpha: f64) -> f64 {
    let tan2 = (1.0 - cos * cos).max(0.0) / (cos * cos);
    0.5 * ((1.0 + alpha * alpha * tan2).sqrt() - 1.0)
}

/// Monte-Carlo estimate of `∫ f_spec(v, l) cos θ_l dl` for a dielectric GGX
/// lobe with `F0 = 0.04`, with directions drawn from an equal mixture of a
/// cosine-weighted hemisphere and the half-vector distribution `D·cosθ_h`
/// (combined by the balance heuristic).
pub fn mc_brdf_integral(roughness: f64, cos_v: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let alpha = roughness * roughness;
    let v = Vector3::new((1.0 - cos_v * cos_v).max(0.0).sqrt(), 0.0, cos_v);
    let mut acc = 0.0;
    for _ in 0..samples {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let l = if rng.random::<bool>() {
            let r = u1.sqrt();
            let phi = 2.0 * PI * u2;
            Vector3::new(r * phi.cos(), r * phi.sin(), (1.0 - u1).max(0.0).sqrt())
        } else {
            let a2 = alpha * alpha;
            let cos_h = ((1.0 - u1) / (1.0 + (a2 - 1.0) * u1)).sqrt();
            let sin_h = (1.0 - cos_h * cos_h).max(0.0).sqrt();
            let phi = 2.0 * PI * u2;
            let h = Vector3::new(sin_h * phi.cos(), sin_h * phi.sin(), cos_h);
            2.0 * v.dot(&h) * h - v
        };
        if l.z <= 0.0 {
            continue;
        }
        let h = (v + l).normalize();
        let v_dot_h = v.dot(&h);
        if v_dot_h <= 0.0 {
            continue;
        }
        let d = ggx_d(h.z, alpha);
        let pdf_cos = l.z / PI;
        let pdf_ggx = d * h.z / (4.0 * v_dot_h);
        let pdf = 0.5 * pdf_cos + 0.5 * pdf_ggx;
        let g = 1.0 / (1.0 + g1_lambda(cos_v, alpha) + g1_lambda(l.z, alpha));
        let f = 0.04 + 0.96 * (1.0 - v_dot_h).powi(5);
        let brdf = d * g * f / (4.0 * cos_v * l.z);
        acc += brdf * l.z / pdf;
    }
    acc / samples as f64
}

/// Central finite difference of a scalar function of one variable.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn assert_grad_close(analytic: f64, numeric: f64, rel: f64, abs: f64, what: &str) {
    let err = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    assert!(
        err <= abs || err <= rel * scale,
        "{what}: analytic {analytic:e} vs numeric {numeric:e}"
    );
}

/// 16×16 camera looking along +y at the origin.
pub fn toy_camera() -> Camera {
    Camera::look_at(Vector3::new(0.1, -4.0, 0.3), Vector3::new(0.0, 0.0, 0.2), Vector3::z(), 20.0, 16, 16).unwrap()
}

/// Random mixed scene whose Gaussians are visible from [`toy_camera`].
pub fn toy_scene(seed: u64, n_fg: usize, n_sky: usize) -> Scene {
    let mut rng = rng(seed);
    let foreground = (0..n_fg)
        .map(|_| ForegroundGaussian {
            position: Vector3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.9)),
            rotation: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            log_scales: std::array::from_fn(|_| rng.random_range(-2.6..-1.2)),
            opacity_logit: inverse_sigmoid(rng.random_range(0.2..0.7)),
            material: Material {
                albedo: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
                roughness: rng.random_range(0.2..0.9),
            },
        })
        .collect();
    let sky = (0..n_sky)
        .map(|_| SkyGaussian {
            theta: rng.random_range(0.9..1.45),
            phi: rng.random_range(1.3..1.85),
            rotation: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            log_scales: std::array::from_fn(|_| rng.random_range(-0.6..0.2)),
            opacity_logit: inverse_sigmoid(rng.random_range(0.3..0.7)),
        })
        .collect();
    Scene { foreground, sky, dome: SkyDome::new(Vector3::new(0.0, 0.5, 0.0), 6.0) }
}

/// Direct 11×11 windowed SSIM per pixel and channel, zero padded, with a
/// 2D Gaussian window (σ = 1.5) normalized over the full window.
pub fn ssim_reference(x: &[f64], y: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut out = vec![0.0; w * h * 3];
    for py in 0..h {
        for px in 0..w {
            for c in 0..3 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in win.iter().enumerate() {
                    for (j, wv) in row.iter().enumerate() {
                        let (yy, xx) = (py as i64 + i as i64 - 5, px as i64 + j as i64 - 5);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let k = (yy as usize * w + xx as usize) * 3 + c;
                        let wv = wv / total;
                        mx += wv * x[k];
                        my += wv * y[k];
                        sxx += wv * x[k] * x[k];
                        syy += wv * y[k] * y[k];
                        sxy += wv * x[k] * y[k];
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                out[(py * w + px) * 3 + c] =
                    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    out
}

pub fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Small model over [`toy_scene`] with a random appearance network.
pub fn toy_model(seed: u64, n_fg: usize, n_sky: usize, images: usize) -> splatlight::model::Model {
    let mut r = rng(seed ^ 0x5eed);
    splatlight::model::Model {
        scene: toy_scene(seed, n_fg, n_sky),
        mlp: splatlight::appearance::AppearanceMlp::new(&mut r),
        embeddings: splatlight::appearance::EmbeddingTable::new(images, &mut r),
    }
}

/// Training view on [`toy_camera`] with a random target, the top rows
/// marked as sky and a few occluded pixels.
pub fn toy_view(seed: u64, index: usize) -> splatlight::model::TrainingView {
    let mut r = rng(seed);
    let camera = toy_camera();
    let (w, h) = (camera.width, camera.height);
    splatlight::model::TrainingView {
        id: format!("view{index}"),
        index,
        image: random_image(w, h, &mut r),
        sky_mask: (0..w * h).map(|p| p / w < 4).collect(),
        occluder_mask: (0..w * h).map(|_| r.random_bool(0.05)).collect(),
        camera,
    }
}

/// Degree-4 projection of `f` by a midpoint rule on an `n_theta × 2·n_theta`
/// latitude-longitude grid, using the reference basis.
pub fn sphere_projection(f: impl Fn(&Vector3<f64>) -> [f64; 3], n_theta: usize) -> [Vec<f64>; 3] {
    let n_phi = 2 * n_theta;
    let mut out = [vec![0.0; 25], vec![0.0; 25], vec![0.0; 25]];
    for i in 0..n_theta {
        let theta = PI * (i as f64 + 0.5) / n_theta as f64;
        let w = theta.sin() * (PI / n_theta as f64) * (2.0 * PI / n_phi as f64);
        for j in 0..n_phi {
            let phi = 2.0 * PI * (j as f64 + 0.5) / n_phi as f64;
            let d = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let v = f(&d);
            let basis = sh_reference_all(&d);
            for c in 0..3 {
                for (k, b) in basis.iter().enumerate() {
                    out[c][k] += w * v[c] * b;
                }
            }
        }
    }
    out
}
