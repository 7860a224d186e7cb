//! Quaternion rotations and Gaussian covariance assembly.

use nalgebra::{Matrix3, Vector3, Vector4};

/// Quaternion stored as `[w, x, y, z]`; not necessarily unit length.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn normalize_quat(q: &Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of the normalized quaternion.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = normalize_quat(q);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw (unnormalized) quaternion.
pub fn rotation_matrix_backward(q: &Quat, d_r: &Matrix3<f64>) -> Quat {
    let n = quat_norm(q);
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let g = |i: usize, j: usize| d_r[(i, j)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let d_hat = Vector4::new(dw, dx, dy, dz);
    let q_hat = Vector4::new(w, x, y, z);
    let d = (d_hat - q_hat * q_hat.dot(&d_hat)) / n;
    [d[0], d[1], d[2], d[3]]
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn covariance(q: &Quat, scales: &[f64; 3]) -> Matrix3<f64> {
    let m = rotation_matrix(q) * Matrix3::from_diagonal(&Vector3::from(*scales));
    m * m.transpose()
}

/// Pulls a symmetric `dL/dΣ` back to the quaternion and the log-scales.
pub fn covariance_backward(q: &Quat, log_scales: &[f64; 3], d_sigma: &Matrix3<f64>) -> (Quat, [f64; 3]) {
    let r = rotation_matrix(q);
    let s = log_scales.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    // Σ = M Mᵀ with symmetric G: dL/dM = 2 G M.
    let d_m = 2.0 * d_sigma * m;
    let mut d_log = [0.0; 3];
    let mut d_r = Matrix3::zeros();
    for k in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            ds += d_m[(i, k)] * r[(i, k)];
            d_r[(i, k)] = d_m[(i, k)] * s[k];
        }
        d_log[k] = ds * s[k];
    }
    (rotation_matrix_backward(q, &d_r), d_log)
}

/// Index of the smallest scale; ties resolve to the lowest axis.
pub fn shortest_axis(scales: &[f64; 3]) -> usize {
    let mut k = 0;
    for i in 1..3 {
        if scales[i] < scales[k] {
            k = i;
        }
    }
    k
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Backward of `v / |v|` given the already-normalized `u` and `|v|`.
pub fn normalize_backward(u: &Vector3<f64>, norm: f64, d_u: &Vector3<f64>) -> Vector3<f64> {
    (d_u - u * u.dot(d_u)) / norm
}
