//! Environment-map storage and sampling, incident-radiance composition, and
//! the neutral-light regularizer.

use crate::brdf::sh;
use crate::math::{rgb, vec3, Rgb, Vec3};
use crate::surfel::Surfel;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const ENV_ROWS: usize = 16;
pub const ENV_COLS: usize = 32;

/// Lat-long grid of distant radiance. Row 0 holds the texels nearest the +z
/// pole, columns sweep azimuth; all entries are nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvMapSerde", into = "EnvMapSerde")]
pub struct EnvironmentMap {
    data: Vec<Rgb>,
}

#[derive(Serialize, Deserialize)]
struct EnvMapSerde {
    rows: usize,
    cols: usize,
    rgb: Vec<f64>,
}

impl TryFrom<EnvMapSerde> for EnvironmentMap {
    type Error = String;
    fn try_from(v: EnvMapSerde) -> Result<Self, String> {
        if v.rows != ENV_ROWS || v.cols != ENV_COLS {
            return Err(format!(
                "environment map must be {ENV_ROWS}x{ENV_COLS}, got {}x{}",
                v.rows, v.cols
            ));
        }
        if v.rgb.len() != ENV_ROWS * ENV_COLS * 3 {
            return Err(format!("environment rgb length {} != {}", v.rgb.len(), ENV_ROWS * ENV_COLS * 3));
        }
        let data = v
            .rgb
            .chunks_exact(3)
            .map(|c| rgb(c[0], c[1], c[2]))
            .collect::<Vec<_>>();
        if data.iter().any(|c| c.r < 0.0 || c.g < 0.0 || c.b < 0.0) {
            return Err("environment map entries must be nonnegative".to_string());
        }
        Ok(EnvironmentMap { data })
    }
}

impl From<EnvironmentMap> for EnvMapSerde {
    fn from(map: EnvironmentMap) -> EnvMapSerde {
        let mut rgb = Vec::with_capacity(ENV_ROWS * ENV_COLS * 3);
        for c in &map.data {
            rgb.extend_from_slice(&[c.r, c.g, c.b]);
        }
        EnvMapSerde {
            rows: ENV_ROWS,
            cols: ENV_COLS,
            rgb,
        }
    }
}

impl EnvironmentMap {
    pub fn constant(value: Rgb) -> EnvironmentMap {
        EnvironmentMap {
            data: vec![value; ENV_ROWS * ENV_COLS],
        }
    }

    pub fn from_texels(data: Vec<Rgb>) -> EnvironmentMap {
        assert_eq!(data.len(), ENV_ROWS * ENV_COLS, "environment map must be 16x32");
        EnvironmentMap { data }
    }

    pub fn texel(&self, row: usize, col: usize) -> Rgb {
        self.data[row * ENV_COLS + col]
    }

    pub fn texel_mut(&mut self, row: usize, col: usize) -> &mut Rgb {
        &mut self.data[row * ENV_COLS + col]
    }

    pub fn texels(&self) -> &[Rgb] {
        &self.data
    }

    pub fn texels_mut(&mut self) -> &mut [Rgb] {
        &mut self.data
    }

    /// Direction of a texel center; the inverse of the sampling mapping.
    pub fn texel_center_dir(row: usize, col: usize) -> Vec3 {
        let theta = (row as f64 + 0.5) / ENV_ROWS as f64 * PI;
        let phi = (col as f64 + 0.5) / ENV_COLS as f64 * 2.0 * PI;
        vec3(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
    }

    pub fn scaled(&self, s: f64) -> EnvironmentMap {
        EnvironmentMap {
            data: self.data.iter().map(|c| *c * s).collect(),
        }
    }
}

/// Bilinear sample footprint: up to four texels with weights, plus the value
/// and its angular derivatives (for chaining through unit directions).
pub struct EnvSample {
    pub value: Rgb,
    /// (row, col, weight) of the contributing texels.
    pub taps: [(usize, usize, f64); 4],
    /// Gradient of the sampled value with respect to the direction; valid
    /// when dotted with perturbations tangent to the unit sphere.
    pub d_dir: [Vec3; 3],
}

/// Bilinear lat-long interpolation with azimuth wrap-around. Polar rows are
/// clamped; the exact poles return the pole-row average.
pub fn env_sample(map: &EnvironmentMap, dir: Vec3) -> Rgb {
    env_sample_full(map, dir).value
}

pub fn env_sample_full(map: &EnvironmentMap, dir: Vec3) -> EnvSample {
    let z = dir.z.clamp(-1.0, 1.0);
    if z.abs() > 1.0 - 1e-12 {
        // Pole: average the nearest row.
        let row = if z > 0.0 { 0 } else { ENV_ROWS - 1 };
        let mut acc = Rgb::BLACK;
        for col in 0..ENV_COLS {
            acc += map.texel(row, col);
        }
        let value = acc / ENV_COLS as f64;
        return EnvSample {
            value,
            taps: [(row, 0, 0.0); 4],
            d_dir: [Vec3::ZERO; 3],
        };
    }
    let theta = z.acos();
    let mut phi = dir.y.atan2(dir.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }

    let tr_raw = theta / PI * ENV_ROWS as f64 - 0.5;
    let tr = tr_raw.clamp(0.0, (ENV_ROWS - 1) as f64);
    let clamped = tr_raw != tr;
    let r0 = (tr.floor() as usize).min(ENV_ROWS - 1);
    let r1 = (r0 + 1).min(ENV_ROWS - 1);
    let fr = tr - r0 as f64;

    let mut tc = phi / (2.0 * PI) * ENV_COLS as f64 - 0.5;
    if tc < 0.0 {
        tc += ENV_COLS as f64;
    }
    let c0 = (tc.floor() as usize) % ENV_COLS;
    let c1 = (c0 + 1) % ENV_COLS;
    let fc = tc - tc.floor();

    let e00 = map.texel(r0, c0);
    let e01 = map.texel(r0, c1);
    let e10 = map.texel(r1, c0);
    let e11 = map.texel(r1, c1);
    let value = e00 * ((1.0 - fr) * (1.0 - fc))
        + e01 * ((1.0 - fr) * fc)
        + e10 * (fr * (1.0 - fc))
        + e11 * (fr * fc);

    // Angular derivatives of the bilinear weights.
    let dv_dtheta = if clamped {
        Rgb::BLACK
    } else {
        ((e10 - e00) * (1.0 - fc) + (e11 - e01) * fc) * (ENV_ROWS as f64 / PI)
    };
    let dv_dphi = ((e01 - e00) * (1.0 - fr) + (e11 - e10) * fr) * (ENV_COLS as f64 / (2.0 * PI));

    let sin_theta = (1.0 - z * z).sqrt().max(1e-9);
    let dtheta_ddir = vec3(0.0, 0.0, -1.0 / sin_theta);
    let planar = (dir.x * dir.x + dir.y * dir.y).max(1e-18);
    let dphi_ddir = vec3(-dir.y / planar, dir.x / planar, 0.0);

    let d_dir = [
        dtheta_ddir * dv_dtheta.r + dphi_ddir * dv_dphi.r,
        dtheta_ddir * dv_dtheta.g + dphi_ddir * dv_dphi.g,
        dtheta_ddir * dv_dtheta.b + dphi_ddir * dv_dphi.b,
    ];

    EnvSample {
        value,
        taps: [
            (r0, c0, (1.0 - fr) * (1.0 - fc)),
            (r0, c1, (1.0 - fr) * fc),
            (r1, c0, fr * (1.0 - fc)),
            (r1, c1, fr * fc),
        ],
        d_dir,
    }
}

/// Incident radiance toward a surfel: shadowed environment light plus the
/// surfel's own indirect SH term, clamped nonnegative.
pub fn incident_radiance(surfel: &Surfel, omega_i: Vec3, map: &EnvironmentMap, vis: f64) -> Rgb {
    let direct = env_sample(map, omega_i) * vis;
    let indirect = sh::eval_sh(&surfel.indirect_sh, omega_i)
        .expect("indirect SH length is type-invariant")
        .clamp_non_negative();
    direct + indirect
}

/// Channel-neutrality penalty: mean over texels of the summed per-channel
/// deviation from the texel's gray level.
pub fn light_reg(map: &EnvironmentMap) -> f64 {
    let mut acc = 0.0;
    for t in map.texels() {
        if t.r == t.g && t.g == t.b {
            continue; // exactly gray; keeps the zero-iff-gray identity exact
        }
        let mean = t.mean();
        acc += (t.r - mean).abs() + (t.g - mean).abs() + (t.b - mean).abs();
    }
    acc / (ENV_ROWS * ENV_COLS) as f64
}

/// Gradient of `light_reg` with respect to every texel channel.
pub fn light_reg_grad(map: &EnvironmentMap) -> Vec<Rgb> {
    let inv = 1.0 / (ENV_ROWS * ENV_COLS) as f64;
    map.texels()
        .iter()
        .map(|t| {
            if t.r == t.g && t.g == t.b {
                return Rgb::BLACK;
            }
            let mean = t.mean();
            let signs = [
                (t.r - mean).signum() * (((t.r - mean) != 0.0) as i32 as f64),
                (t.g - mean).signum() * (((t.g - mean) != 0.0) as i32 as f64),
                (t.b - mean).signum() * (((t.b - mean) != 0.0) as i32 as f64),
            ];
            let sign_sum: f64 = signs.iter().sum();
            rgb(
                (signs[0] - sign_sum / 3.0) * inv,
                (signs[1] - sign_sum / 3.0) * inv,
                (signs[2] - sign_sum / 3.0) * inv,
            )
        })
        .collect()
}
