//! Real spherical harmonics, bands 0..=3, in the convention used by the
//! splatting renderers this project follows (orthonormal basis, graphics
//! sign choices).

use crate::math::{vec3, Rgb, Vec3};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_COEFFS: usize = 16;

/// Number of coefficients for a band-limited expansion through band `deg`.
pub fn coeff_count(deg: usize) -> usize {
    (deg + 1) * (deg + 1)
}

/// Basis values Y_0..Y_{n-1} at `dir` for n in {1, 4, 9, 16}.
pub fn eval_basis(dir: Vec3, out: &mut [f64]) {
    let n = out.len();
    debug_assert!(matches!(n, 1 | 4 | 9 | 16), "unsupported SH length {n}");
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = SH_C0;
    if n == 1 {
        return;
    }
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if n == 4 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = C2[0] * xy;
    out[5] = C2[1] * yz;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * xz;
    out[8] = C2[4] * (xx - yy);
    if n == 9 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * xy * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
}

/// Basis values plus per-function gradients with respect to the (free)
/// direction coordinates. Chained against tangent perturbations of a unit
/// direction this gives exact directional derivatives.
pub fn eval_basis_with_grad(dir: Vec3, out: &mut [f64], grad: &mut [Vec3]) {
    let n = out.len();
    debug_assert_eq!(n, grad.len());
    eval_basis(dir, out);
    let (x, y, z) = (dir.x, dir.y, dir.z);
    grad[0] = Vec3::ZERO;
    if n == 1 {
        return;
    }
    grad[1] = vec3(0.0, -C1, 0.0);
    grad[2] = vec3(0.0, 0.0, C1);
    grad[3] = vec3(-C1, 0.0, 0.0);
    if n == 4 {
        return;
    }
    grad[4] = vec3(C2[0] * y, C2[0] * x, 0.0);
    grad[5] = vec3(0.0, C2[1] * z, C2[1] * y);
    grad[6] = vec3(-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z);
    grad[7] = vec3(C2[3] * z, 0.0, C2[3] * x);
    grad[8] = vec3(2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0);
    if n == 9 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    grad[9] = vec3(C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0);
    grad[10] = vec3(C3[1] * y * z, C3[1] * x * z, C3[1] * x * y);
    grad[11] = vec3(
        -2.0 * C3[2] * x * y,
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * C3[2] * y * z,
    );
    grad[12] = vec3(
        -6.0 * C3[3] * x * z,
        -6.0 * C3[3] * y * z,
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    );
    grad[13] = vec3(
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * C3[4] * x * y,
        8.0 * C3[4] * x * z,
    );
    grad[14] = vec3(2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy));
    grad[15] = vec3(C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0);
}

/// Contract per-channel coefficients against the basis at `dir`.
/// Coefficient counts other than 1, 4, 9 or 16 are rejected.
pub fn eval_sh(coeffs: &[Rgb], dir: Vec3) -> Result<Rgb, ShError> {
    if !matches!(coeffs.len(), 1 | 4 | 9 | 16) {
        return Err(ShError::BadLength(coeffs.len()));
    }
    let mut basis = [0.0; MAX_COEFFS];
    eval_basis(dir, &mut basis[..coeffs.len()]);
    let mut acc = Rgb::BLACK;
    for (c, b) in coeffs.iter().zip(basis.iter()) {
        acc += *c * *b;
    }
    Ok(acc)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ShError {
    #[error("SH coefficient count {0} is not one of 1, 4, 9, 16")]
    BadLength(usize),
}
