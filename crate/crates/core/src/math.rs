//! Small fixed-size linear algebra used throughout the renderer.
//!
//! Everything is `f64`: the optimizer validates analytic gradients against
//! central finite differences at step 1e-4, which leaves no headroom for
//! single precision.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, Neg, Sub, SubAssign};

/// Serialized as a plain `[x, y, z]` array in scene files.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Serialize for Vec3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y, self.z].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vec3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        Ok(vec3(x, y, z))
    }
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);
    pub const X: Vec3 = vec3(1.0, 0.0, 0.0);
    pub const Y: Vec3 = vec3(0.0, 1.0, 0.0);
    pub const Z: Vec3 = vec3(0.0, 0.0, 1.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn min_abs_axis(self) -> usize {
        let a = [self.x.abs(), self.y.abs(), self.z.abs()];
        let mut best = 0;
        for i in 1..3 {
            if a[i] < a[best] {
                best = i;
            }
        }
        best
    }

    /// Unit vector orthogonal to `self` (assumed unit), built from the
    /// smallest-component axis so the construction is stable.
    pub fn any_orthonormal(self) -> Vec3 {
        let mut axis = [0.0; 3];
        axis[self.min_abs_axis()] = 1.0;
        let axis = vec3(axis[0], axis[1], axis[2]);
        self.cross(axis).normalized()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl IndexMut<usize> for Vec3 {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        vec3(self.x / s, self.y / s, self.z / s)
    }
}

/// Linear RGB triple. Shares no storage with `Vec3` on purpose: colors and
/// directions obey different invariants. Serialized as `[r, g, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Serialize for Rgb {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.r, self.g, self.b].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rgb {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [r, g, b] = <[f64; 3]>::deserialize(d)?;
        Ok(rgb(r, g, b))
    }
}

pub const fn rgb(r: f64, g: f64, b: f64) -> Rgb {
    Rgb { r, g, b }
}

impl Rgb {
    pub const BLACK: Rgb = rgb(0.0, 0.0, 0.0);

    pub fn splat(v: f64) -> Rgb {
        rgb(v, v, v)
    }

    pub fn max_channel(self) -> f64 {
        self.r.max(self.g).max(self.b)
    }

    pub fn mean(self) -> f64 {
        (self.r + self.g + self.b) / 3.0
    }

    pub fn clamp_non_negative(self) -> Rgb {
        rgb(self.r.max(0.0), self.g.max(0.0), self.b.max(0.0))
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Rgb {
        rgb(f(self.r), f(self.g), f(self.b))
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }
}

impl Index<usize> for Rgb {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.r,
            1 => &self.g,
            2 => &self.b,
            _ => panic!("Rgb index {i} out of range"),
        }
    }
}

impl IndexMut<usize> for Rgb {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        match i {
            0 => &mut self.r,
            1 => &mut self.g,
            2 => &mut self.b,
            _ => panic!("Rgb index {i} out of range"),
        }
    }
}

impl Add for Rgb {
    type Output = Rgb;
    fn add(self, o: Rgb) -> Rgb {
        rgb(self.r + o.r, self.g + o.g, self.b + o.b)
    }
}

impl AddAssign for Rgb {
    fn add_assign(&mut self, o: Rgb) {
        *self = *self + o;
    }
}

impl Sub for Rgb {
    type Output = Rgb;
    fn sub(self, o: Rgb) -> Rgb {
        rgb(self.r - o.r, self.g - o.g, self.b - o.b)
    }
}

impl Mul<f64> for Rgb {
    type Output = Rgb;
    fn mul(self, s: f64) -> Rgb {
        rgb(self.r * s, self.g * s, self.b * s)
    }
}

impl Mul<Rgb> for f64 {
    type Output = Rgb;
    fn mul(self, c: Rgb) -> Rgb {
        c * self
    }
}

impl Mul<Rgb> for Rgb {
    type Output = Rgb;
    fn mul(self, o: Rgb) -> Rgb {
        rgb(self.r * o.r, self.g * o.g, self.b * o.b)
    }
}

impl Div<f64> for Rgb {
    type Output = Rgb;
    fn div(self, s: f64) -> Rgb {
        rgb(self.r / s, self.g / s, self.b / s)
    }
}

/// Column-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub cols: [Vec3; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        cols: [Vec3::X, Vec3::Y, Vec3::Z],
    };

    pub fn from_cols(a: Vec3, b: Vec3, c: Vec3) -> Mat3 {
        Mat3 { cols: [a, b, c] }
    }

    pub fn from_rows(a: Vec3, b: Vec3, c: Vec3) -> Mat3 {
        Mat3::from_cols(a, b, c).transpose()
    }

    /// Row-major flat init, matching how rotations appear in scene files.
    pub fn from_row_major(m: [f64; 9]) -> Mat3 {
        Mat3::from_rows(
            vec3(m[0], m[1], m[2]),
            vec3(m[3], m[4], m[5]),
            vec3(m[6], m[7], m[8]),
        )
    }

    pub fn to_row_major(self) -> [f64; 9] {
        let t = self.transpose();
        [
            t.cols[0].x, t.cols[0].y, t.cols[0].z, t.cols[1].x, t.cols[1].y, t.cols[1].z,
            t.cols[2].x, t.cols[2].y, t.cols[2].z,
        ]
    }

    pub fn transpose(self) -> Mat3 {
        let [a, b, c] = self.cols;
        Mat3::from_cols(vec3(a.x, b.x, c.x), vec3(a.y, b.y, c.y), vec3(a.z, b.z, c.z))
    }

    pub fn det(self) -> f64 {
        let [a, b, c] = self.cols;
        a.dot(b.cross(c))
    }

    pub fn mul_vec(self, v: Vec3) -> Vec3 {
        self.cols[0] * v.x + self.cols[1] * v.y + self.cols[2] * v.z
    }

    pub fn mul_mat(self, o: Mat3) -> Mat3 {
        Mat3::from_cols(
            self.mul_vec(o.cols[0]),
            self.mul_vec(o.cols[1]),
            self.mul_vec(o.cols[2]),
        )
    }

    /// Largest deviation of R^T R from the identity; 0 for a perfect rotation.
    pub fn orthonormality_error(self) -> f64 {
        let gram = self.transpose().mul_mat(self);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram.cols[j][i] - target).abs());
            }
        }
        err
    }
}

/// Solve the 3x3 system [a b c] x = rhs by Cramer's rule (cross-product form).
/// Returns `None` when the determinant magnitude is below `det_eps`.
pub fn solve3(a: Vec3, b: Vec3, c: Vec3, rhs: Vec3, det_eps: f64) -> Option<Vec3> {
    let bc = b.cross(c);
    let det = a.dot(bc);
    if det.abs() < det_eps {
        return None;
    }
    let x = rhs.dot(bc) / det;
    let y = a.dot(rhs.cross(c)) / det;
    let z = a.dot(b.cross(rhs)) / det;
    Some(vec3(x, y, z))
}

/// Rotation taking the unit +z axis onto the unit vector `n` by the minimal
/// arc. Smooth everywhere except the antipode, where a 180-degree flip about
/// x is returned.
pub fn rotation_z_to(n: Vec3) -> Mat3 {
    let c = n.z;
    if c < -1.0 + 1e-12 {
        return Mat3::from_cols(Vec3::X, -Vec3::Y, -Vec3::Z);
    }
    // Rodrigues with k = z x n, written out so the same expression can be
    // differentiated in closed form elsewhere.
    let k = vec3(-n.y, n.x, 0.0);
    let f = 1.0 / (1.0 + c);
    Mat3::from_cols(
        rotate_z_to_apply(k, f, Vec3::X),
        rotate_z_to_apply(k, f, Vec3::Y),
        rotate_z_to_apply(k, f, Vec3::Z),
    )
}

fn rotate_z_to_apply(k: Vec3, f: f64, d: Vec3) -> Vec3 {
    d + k.cross(d) + k.cross(k.cross(d)) * f
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of `softplus`; the input is floored so exact zeros stay
/// representable as a large negative raw value.
pub fn inv_softplus(v: f64) -> f64 {
    let v = v.max(1e-8);
    if v > 30.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

/// Dense row-major image/buffer of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Grid<T> {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Grid<T> {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Grid {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}
