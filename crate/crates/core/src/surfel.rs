//! The flat-Gaussian primitive: a 2D Gaussian kernel living on a scaled,
//! oriented tangent plane in world space.

use crate::math::{vec3, Rgb, Vec3};
use serde::{Deserialize, Serialize};

/// Number of SH coefficients per channel for the view-dependent diffuse color
/// (bands 0..=3).
pub const DIFFUSE_SH_COEFFS: usize = 16;
/// Number of SH coefficients per channel for the local indirect radiance
/// (bands 0..=2).
pub const INDIRECT_SH_COEFFS: usize = 9;

/// One Gaussian surfel. Tangents are kept orthonormal by the optimizer; all
/// rendering math tolerates small deviations so finite-difference probes of
/// raw tangent coordinates stay well-defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Surfel {
    pub position: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub scale_u: f64,
    pub scale_v: f64,
    pub opacity: f64,
    pub roughness: f64,
    pub specular_reflectance: Rgb,
    /// 16 coefficients per channel, coefficient-major.
    pub diffuse_sh: Vec<Rgb>,
    /// 9 coefficients per channel, coefficient-major.
    pub indirect_sh: Vec<Rgb>,
}

impl Surfel {
    /// Surfel with an identity frame at the origin and neutral appearance.
    pub fn plain(position: Vec3, scale: f64, opacity: f64) -> Surfel {
        Surfel {
            position,
            tangent_u: Vec3::X,
            tangent_v: Vec3::Y,
            scale_u: scale,
            scale_v: scale,
            opacity,
            roughness: 0.5,
            specular_reflectance: Rgb::splat(0.04),
            diffuse_sh: vec![Rgb::BLACK; DIFFUSE_SH_COEFFS],
            indirect_sh: vec![Rgb::BLACK; INDIRECT_SH_COEFFS],
        }
    }

    /// Checks the type invariants; returns the first violation found.
    pub fn validate(&self) -> Result<(), String> {
        let tol = 1e-6;
        if (self.tangent_u.norm() - 1.0).abs() > tol {
            return Err(format!("tangent_u not unit: |t_u| = {}", self.tangent_u.norm()));
        }
        if (self.tangent_v.norm() - 1.0).abs() > tol {
            return Err(format!("tangent_v not unit: |t_v| = {}", self.tangent_v.norm()));
        }
        if self.tangent_u.dot(self.tangent_v).abs() > tol {
            return Err(format!(
                "tangents not orthogonal: dot = {}",
                self.tangent_u.dot(self.tangent_v)
            ));
        }
        if !(self.scale_u > 0.0 && self.scale_v > 0.0) {
            return Err(format!("scales must be positive: ({}, {})", self.scale_u, self.scale_v));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity out of [0,1]: {}", self.opacity));
        }
        if !(self.roughness > 0.0 && self.roughness <= 1.0) {
            return Err(format!("roughness out of (0,1]: {}", self.roughness));
        }
        for c in 0..3 {
            if !(0.0..=1.0).contains(&self.specular_reflectance[c]) {
                return Err(format!(
                    "specular_reflectance channel {c} out of [0,1]: {}",
                    self.specular_reflectance[c]
                ));
            }
        }
        if self.diffuse_sh.len() != DIFFUSE_SH_COEFFS {
            return Err(format!("diffuse_sh has {} coeffs, want {DIFFUSE_SH_COEFFS}", self.diffuse_sh.len()));
        }
        if self.indirect_sh.len() != INDIRECT_SH_COEFFS {
            return Err(format!("indirect_sh has {} coeffs, want {INDIRECT_SH_COEFFS}", self.indirect_sh.len()));
        }
        Ok(())
    }

    /// Unit surface normal `t_u x t_v`, re-normalized so slightly
    /// non-orthonormal tangents still give a unit vector.
    pub fn normal(&self) -> Vec3 {
        self.tangent_u.cross(self.tangent_v).normalized()
    }

    /// World-space point of local plane coordinates (u, v).
    pub fn point_at(&self, u: f64, v: f64) -> Vec3 {
        self.position + self.tangent_u * (self.scale_u * u) + self.tangent_v * (self.scale_v * v)
    }

    /// Inverse of the plane parameterization for a point on (or near) the
    /// plane: the (u, v) whose `point_at` is the in-plane projection of `p`.
    pub fn local_coords(&self, p: Vec3) -> (f64, f64) {
        // With orthonormal tangents the frame inverse is analytic.
        let d = p - self.position;
        (
            d.dot(self.tangent_u) / self.scale_u,
            d.dot(self.tangent_v) / self.scale_v,
        )
    }

    /// Homogeneous local-plane-to-world transform with columns
    /// [s_u t_u, s_v t_v, 0, p]. Mapping (u, v, 1, 1) gives `point_at(u, v)`.
    pub fn local_to_world(&self) -> [[f64; 4]; 4] {
        let a = self.tangent_u * self.scale_u;
        let b = self.tangent_v * self.scale_v;
        let p = self.position;
        [
            [a.x, b.x, 0.0, p.x],
            [a.y, b.y, 0.0, p.y],
            [a.z, b.z, 0.0, p.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Orthonormalize the tangent frame in place: normalize t_u, then
    /// Gram-Schmidt t_v against it. Called after every optimizer step.
    pub fn orthonormalize_tangents(&mut self) {
        self.tangent_u = self.tangent_u.normalized();
        let proj = self.tangent_v.dot(self.tangent_u);
        self.tangent_v = (self.tangent_v - self.tangent_u * proj).normalized();
    }
}

/// Standard 2D Gaussian kernel exp(-(u^2+v^2)/2); 1 at the center.
pub fn eval_kernel(u: f64, v: f64) -> f64 {
    (-(u * u + v * v) / 2.0).exp()
}

/// Deterministic sphere of surfels: Fibonacci-distributed positions with
/// outward normals, sized so neighboring disks overlap.
pub fn sphere_surfels(count: usize, radius: f64, albedo: Rgb, roughness: f64) -> Vec<Surfel> {
    let mut out = Vec::with_capacity(count);
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    // Disk radius ~ sqrt(area share) with overlap margin.
    let scale = 0.75 * radius * (4.0 * std::f64::consts::PI / count as f64).sqrt();
    for k in 0..count {
        let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
        let phi = golden * k as f64;
        let s = (1.0 - z * z).max(0.0).sqrt();
        let n = vec3(s * phi.cos(), s * phi.sin(), z);
        let t_u = n.any_orthonormal();
        let t_v = n.cross(t_u);
        let mut surfel = Surfel {
            position: n * radius,
            tangent_u: t_u,
            tangent_v: t_v,
            scale_u: scale,
            scale_v: scale,
            opacity: 0.95,
            roughness,
            specular_reflectance: Rgb::splat(0.04),
            diffuse_sh: vec![Rgb::BLACK; DIFFUSE_SH_COEFFS],
            indirect_sh: vec![Rgb::BLACK; INDIRECT_SH_COEFFS],
        };
        surfel.diffuse_sh[0] = albedo * (1.0 / crate::brdf::sh::SH_C0);
        out.push(surfel);
    }
    out
}

/// Axis-aligned box shell of surfels, one per cell of a per-face grid.
pub fn box_surfels(per_face: usize, half_extent: f64, albedo: Rgb, roughness: f64) -> Vec<Surfel> {
    let mut out = Vec::new();
    let n = per_face.max(1);
    let cell = 2.0 * half_extent / n as f64;
    let scale = 0.75 * cell;
    for axis in 0..3usize {
        for side in [-1.0, 1.0] {
            let mut normal = Vec3::ZERO;
            normal[axis] = side;
            let t_u = normal.any_orthonormal();
            let t_v = normal.cross(t_u);
            for i in 0..n {
                for j in 0..n {
                    let a = -half_extent + cell * (i as f64 + 0.5);
                    let b = -half_extent + cell * (j as f64 + 0.5);
                    let position = normal * half_extent + t_u * a + t_v * b;
                    let mut surfel = Surfel {
                        position,
                        tangent_u: t_u,
                        tangent_v: t_v,
                        scale_u: scale,
                        scale_v: scale,
                        opacity: 0.95,
                        roughness,
                        specular_reflectance: Rgb::splat(0.04),
                        diffuse_sh: vec![Rgb::BLACK; DIFFUSE_SH_COEFFS],
                        indirect_sh: vec![Rgb::BLACK; INDIRECT_SH_COEFFS],
                    };
                    surfel.diffuse_sh[0] = albedo * (1.0 / crate::brdf::sh::SH_C0);
                    out.push(surfel);
                }
            }
        }
    }
    out
}
