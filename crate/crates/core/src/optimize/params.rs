//! Optimizable scene parameterization. Bounded quantities live in an
//! unconstrained raw space (logits for opacity/roughness/reflectance, logs
//! for scales, softplus for environment radiance) so plain gradient steps
//! can never leave their domains.

use crate::lighting::{EnvironmentMap, ENV_COLS, ENV_ROWS};
use crate::math::{inv_softplus, logit, sigmoid, softplus, Rgb, Vec3};
use crate::surfel::{Surfel, DIFFUSE_SH_COEFFS, INDIRECT_SH_COEFFS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    Tangents,
    Scales,
    Opacity,
    Roughness,
    SpecularReflectance,
    DiffuseSh,
    IndirectSh,
    Environment,
}

pub const ALL_GROUPS: [ParamGroup; 9] = [
    ParamGroup::Position,
    ParamGroup::Tangents,
    ParamGroup::Scales,
    ParamGroup::Opacity,
    ParamGroup::Roughness,
    ParamGroup::SpecularReflectance,
    ParamGroup::DiffuseSh,
    ParamGroup::IndirectSh,
    ParamGroup::Environment,
];

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Tangents => "tangents",
            ParamGroup::Scales => "scales",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Roughness => "roughness",
            ParamGroup::SpecularReflectance => "specular_reflectance",
            ParamGroup::DiffuseSh => "diffuse_sh",
            ParamGroup::IndirectSh => "indirect_sh",
            ParamGroup::Environment => "environment",
        }
    }
}

/// Raw (unconstrained) scene parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub position: Vec<Vec3>,
    pub tangent_u: Vec<Vec3>,
    pub tangent_v: Vec<Vec3>,
    pub log_scale: Vec<[f64; 2]>,
    pub opacity_raw: Vec<f64>,
    pub roughness_raw: Vec<f64>,
    pub f0_raw: Vec<[f64; 3]>,
    /// Flat, surfel-major: 16 coefficients per surfel.
    pub diffuse_sh: Vec<Rgb>,
    /// Flat, surfel-major: 9 coefficients per surfel.
    pub indirect_sh: Vec<Rgb>,
    /// Flat, row-major: 512 texels in softplus space.
    pub env_raw: Vec<Rgb>,
}

impl SceneParams {
    pub fn n_surfels(&self) -> usize {
        self.position.len()
    }

    pub fn from_scene(surfels: &[Surfel], env: &EnvironmentMap) -> SceneParams {
        let n = surfels.len();
        let mut p = SceneParams {
            position: Vec::with_capacity(n),
            tangent_u: Vec::with_capacity(n),
            tangent_v: Vec::with_capacity(n),
            log_scale: Vec::with_capacity(n),
            opacity_raw: Vec::with_capacity(n),
            roughness_raw: Vec::with_capacity(n),
            f0_raw: Vec::with_capacity(n),
            diffuse_sh: Vec::with_capacity(n * DIFFUSE_SH_COEFFS),
            indirect_sh: Vec::with_capacity(n * INDIRECT_SH_COEFFS),
            env_raw: Vec::with_capacity(ENV_ROWS * ENV_COLS),
        };
        for s in surfels {
            p.position.push(s.position);
            p.tangent_u.push(s.tangent_u);
            p.tangent_v.push(s.tangent_v);
            p.log_scale.push([s.scale_u.ln(), s.scale_v.ln()]);
            p.opacity_raw.push(logit(s.opacity));
            p.roughness_raw.push(logit(s.roughness));
            p.f0_raw.push([
                logit(s.specular_reflectance.r),
                logit(s.specular_reflectance.g),
                logit(s.specular_reflectance.b),
            ]);
            p.diffuse_sh.extend_from_slice(&s.diffuse_sh);
            p.indirect_sh.extend_from_slice(&s.indirect_sh);
        }
        for t in env.texels() {
            p.env_raw
                .push(Rgb {
                    r: inv_softplus(t.r),
                    g: inv_softplus(t.g),
                    b: inv_softplus(t.b),
                });
        }
        p
    }

    pub fn surfels(&self) -> Vec<Surfel> {
        (0..self.n_surfels())
            .map(|i| Surfel {
                position: self.position[i],
                tangent_u: self.tangent_u[i],
                tangent_v: self.tangent_v[i],
                scale_u: self.log_scale[i][0].exp(),
                scale_v: self.log_scale[i][1].exp(),
                opacity: sigmoid(self.opacity_raw[i]),
                roughness: sigmoid(self.roughness_raw[i]),
                specular_reflectance: Rgb {
                    r: sigmoid(self.f0_raw[i][0]),
                    g: sigmoid(self.f0_raw[i][1]),
                    b: sigmoid(self.f0_raw[i][2]),
                },
                diffuse_sh: self.diffuse_sh[i * DIFFUSE_SH_COEFFS..(i + 1) * DIFFUSE_SH_COEFFS]
                    .to_vec(),
                indirect_sh: self.indirect_sh
                    [i * INDIRECT_SH_COEFFS..(i + 1) * INDIRECT_SH_COEFFS]
                    .to_vec(),
            })
            .collect()
    }

    pub fn environment(&self) -> EnvironmentMap {
        EnvironmentMap::from_texels(
            self.env_raw
                .iter()
                .map(|t| Rgb {
                    r: softplus(t.r),
                    g: softplus(t.g),
                    b: softplus(t.b),
                })
                .collect(),
        )
    }

    /// Normalize t_u and Gram-Schmidt t_v against it, for every surfel.
    /// Runs after each optimizer step.
    pub fn orthonormalize_tangents(&mut self) {
        for i in 0..self.n_surfels() {
            self.tangent_u[i] = self.tangent_u[i].normalized();
            let proj = self.tangent_v[i].dot(self.tangent_u[i]);
            self.tangent_v[i] = (self.tangent_v[i] - self.tangent_u[i] * proj).normalized();
        }
    }

    pub fn group_len(&self, group: ParamGroup) -> usize {
        let n = self.n_surfels();
        match group {
            ParamGroup::Position => n * 3,
            ParamGroup::Tangents => n * 6,
            ParamGroup::Scales => n * 2,
            ParamGroup::Opacity => n,
            ParamGroup::Roughness => n,
            ParamGroup::SpecularReflectance => n * 3,
            ParamGroup::DiffuseSh => n * DIFFUSE_SH_COEFFS * 3,
            ParamGroup::IndirectSh => n * INDIRECT_SH_COEFFS * 3,
            ParamGroup::Environment => ENV_ROWS * ENV_COLS * 3,
        }
    }

    pub fn coord(&self, group: ParamGroup, idx: usize) -> f64 {
        match group {
            ParamGroup::Position => self.position[idx / 3][idx % 3],
            ParamGroup::Tangents => {
                let (i, c) = (idx / 6, idx % 6);
                if c < 3 {
                    self.tangent_u[i][c]
                } else {
                    self.tangent_v[i][c - 3]
                }
            }
            ParamGroup::Scales => self.log_scale[idx / 2][idx % 2],
            ParamGroup::Opacity => self.opacity_raw[idx],
            ParamGroup::Roughness => self.roughness_raw[idx],
            ParamGroup::SpecularReflectance => self.f0_raw[idx / 3][idx % 3],
            ParamGroup::DiffuseSh => self.diffuse_sh[idx / 3][idx % 3],
            ParamGroup::IndirectSh => self.indirect_sh[idx / 3][idx % 3],
            ParamGroup::Environment => self.env_raw[idx / 3][idx % 3],
        }
    }

    pub fn add_coord(&mut self, group: ParamGroup, idx: usize, delta: f64) {
        match group {
            ParamGroup::Position => self.position[idx / 3][idx % 3] += delta,
            ParamGroup::Tangents => {
                let (i, c) = (idx / 6, idx % 6);
                if c < 3 {
                    self.tangent_u[i][c] += delta;
                } else {
                    self.tangent_v[i][c - 3] += delta;
                }
            }
            ParamGroup::Scales => self.log_scale[idx / 2][idx % 2] += delta,
            ParamGroup::Opacity => self.opacity_raw[idx] += delta,
            ParamGroup::Roughness => self.roughness_raw[idx] += delta,
            ParamGroup::SpecularReflectance => self.f0_raw[idx / 3][idx % 3] += delta,
            ParamGroup::DiffuseSh => self.diffuse_sh[idx / 3][idx % 3] += delta,
            ParamGroup::IndirectSh => self.indirect_sh[idx / 3][idx % 3] += delta,
            ParamGroup::Environment => self.env_raw[idx / 3][idx % 3] += delta,
        }
    }
}

/// Gradient container; shapes mirror `SceneParams`. Whether values live in
/// natural or raw space depends on context: the backward pass fills natural
/// gradients, `to_raw` converts them.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub position: Vec<Vec3>,
    pub tangent_u: Vec<Vec3>,
    pub tangent_v: Vec<Vec3>,
    pub scale: Vec<[f64; 2]>,
    pub opacity: Vec<f64>,
    pub roughness: Vec<f64>,
    pub f0: Vec<Rgb>,
    pub diffuse_sh: Vec<Rgb>,
    pub indirect_sh: Vec<Rgb>,
    pub env: Vec<Rgb>,
}

impl SceneGrads {
    pub fn zeros(n_surfels: usize) -> SceneGrads {
        SceneGrads {
            position: vec![Vec3::ZERO; n_surfels],
            tangent_u: vec![Vec3::ZERO; n_surfels],
            tangent_v: vec![Vec3::ZERO; n_surfels],
            scale: vec![[0.0; 2]; n_surfels],
            opacity: vec![0.0; n_surfels],
            roughness: vec![0.0; n_surfels],
            f0: vec![Rgb::BLACK; n_surfels],
            diffuse_sh: vec![Rgb::BLACK; n_surfels * DIFFUSE_SH_COEFFS],
            indirect_sh: vec![Rgb::BLACK; n_surfels * INDIRECT_SH_COEFFS],
            env: vec![Rgb::BLACK; ENV_ROWS * ENV_COLS],
        }
    }

    pub fn accumulate(&mut self, other: &SceneGrads) {
        for (a, b) in self.position.iter_mut().zip(&other.position) {
            *a += *b;
        }
        for (a, b) in self.tangent_u.iter_mut().zip(&other.tangent_u) {
            *a += *b;
        }
        for (a, b) in self.tangent_v.iter_mut().zip(&other.tangent_v) {
            *a += *b;
        }
        for (a, b) in self.scale.iter_mut().zip(&other.scale) {
            a[0] += b[0];
            a[1] += b[1];
        }
        for (a, b) in self.opacity.iter_mut().zip(&other.opacity) {
            *a += *b;
        }
        for (a, b) in self.roughness.iter_mut().zip(&other.roughness) {
            *a += *b;
        }
        for (a, b) in self.f0.iter_mut().zip(&other.f0) {
            *a += *b;
        }
        for (a, b) in self.diffuse_sh.iter_mut().zip(&other.diffuse_sh) {
            *a += *b;
        }
        for (a, b) in self.indirect_sh.iter_mut().zip(&other.indirect_sh) {
            *a += *b;
        }
        for (a, b) in self.env.iter_mut().zip(&other.env) {
            *a += *b;
        }
    }

    /// Chain natural-space gradients through the reparameterizations so they
    /// apply to the raw coordinates of `params`.
    pub fn to_raw(&self, params: &SceneParams) -> SceneGrads {
        let mut out = self.clone();
        for i in 0..params.n_surfels() {
            for c in 0..2 {
                out.scale[i][c] = self.scale[i][c] * params.log_scale[i][c].exp();
            }
            let so = sigmoid(params.opacity_raw[i]);
            out.opacity[i] = self.opacity[i] * so * (1.0 - so);
            let sr = sigmoid(params.roughness_raw[i]);
            out.roughness[i] = self.roughness[i] * sr * (1.0 - sr);
            for c in 0..3 {
                let sf = sigmoid(params.f0_raw[i][c]);
                out.f0[i][c] = self.f0[i][c] * sf * (1.0 - sf);
            }
        }
        for (t, (g, raw)) in out.env.iter_mut().zip(self.env.iter().zip(&params.env_raw)) {
            for c in 0..3 {
                t[c] = g[c] * sigmoid(raw[c]);
            }
        }
        out
    }

    pub fn coord(&self, group: ParamGroup, idx: usize) -> f64 {
        match group {
            ParamGroup::Position => self.position[idx / 3][idx % 3],
            ParamGroup::Tangents => {
                let (i, c) = (idx / 6, idx % 6);
                if c < 3 {
                    self.tangent_u[i][c]
                } else {
                    self.tangent_v[i][c - 3]
                }
            }
            ParamGroup::Scales => self.scale[idx / 2][idx % 2],
            ParamGroup::Opacity => self.opacity[idx],
            ParamGroup::Roughness => self.roughness[idx],
            ParamGroup::SpecularReflectance => self.f0[idx / 3][idx % 3],
            ParamGroup::DiffuseSh => self.diffuse_sh[idx / 3][idx % 3],
            ParamGroup::IndirectSh => self.indirect_sh[idx / 3][idx % 3],
            ParamGroup::Environment => self.env[idx / 3][idx % 3],
        }
    }

    /// Zero one group's gradients (freeze plumbing).
    pub fn zero_group(&mut self, group: ParamGroup) {
        match group {
            ParamGroup::Position => self.position.iter_mut().for_each(|v| *v = Vec3::ZERO),
            ParamGroup::Tangents => {
                self.tangent_u.iter_mut().for_each(|v| *v = Vec3::ZERO);
                self.tangent_v.iter_mut().for_each(|v| *v = Vec3::ZERO);
            }
            ParamGroup::Scales => self.scale.iter_mut().for_each(|v| *v = [0.0; 2]),
            ParamGroup::Opacity => self.opacity.iter_mut().for_each(|v| *v = 0.0),
            ParamGroup::Roughness => self.roughness.iter_mut().for_each(|v| *v = 0.0),
            ParamGroup::SpecularReflectance => self.f0.iter_mut().for_each(|v| *v = Rgb::BLACK),
            ParamGroup::DiffuseSh => self.diffuse_sh.iter_mut().for_each(|v| *v = Rgb::BLACK),
            ParamGroup::IndirectSh => self.indirect_sh.iter_mut().for_each(|v| *v = Rgb::BLACK),
            ParamGroup::Environment => self.env.iter_mut().for_each(|v| *v = Rgb::BLACK),
        }
    }
}

/// Per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position: f64,
    pub tangent: f64,
    pub scale: f64,
    pub opacity: f64,
    pub material: f64,
    pub environment: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            tangent: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            material: 2.5e-3,
            environment: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Position => self.position,
            ParamGroup::Tangents => self.tangent,
            ParamGroup::Scales => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Roughness
            | ParamGroup::SpecularReflectance
            | ParamGroup::DiffuseSh
            | ParamGroup::IndirectSh => self.material,
            ParamGroup::Environment => self.environment,
        }
    }
}

/// Adam with bias correction, applied per parameter group.
pub struct AdamState {
    m: SceneGrads,
    v: SceneGrads,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n_surfels: usize) -> AdamState {
        AdamState {
            m: SceneGrads::zeros(n_surfels),
            v: SceneGrads::zeros(n_surfels),
            step: 0,
        }
    }

    /// One update over the active groups given raw-space gradients.
    pub fn step(
        &mut self,
        params: &mut SceneParams,
        raw_grads: &SceneGrads,
        rates: &LearningRates,
        active: &[ParamGroup],
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for &group in active {
            let lr = rates.for_group(group);
            let len = params.group_len(group);
            for idx in 0..len {
                let g = raw_grads.coord(group, idx);
                let m = ADAM_BETA1 * self.m.coord(group, idx) + (1.0 - ADAM_BETA1) * g;
                let v = ADAM_BETA2 * self.v.coord(group, idx) + (1.0 - ADAM_BETA2) * g * g;
                set_grad_coord(&mut self.m, group, idx, m);
                set_grad_coord(&mut self.v, group, idx, v);
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                params.add_coord(group, idx, -lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
            }
        }
    }
}

fn set_grad_coord(g: &mut SceneGrads, group: ParamGroup, idx: usize, value: f64) {
    match group {
        ParamGroup::Position => g.position[idx / 3][idx % 3] = value,
        ParamGroup::Tangents => {
            let (i, c) = (idx / 6, idx % 6);
            if c < 3 {
                g.tangent_u[i][c] = value;
            } else {
                g.tangent_v[i][c - 3] = value;
            }
        }
        ParamGroup::Scales => g.scale[idx / 2][idx % 2] = value,
        ParamGroup::Opacity => g.opacity[idx] = value,
        ParamGroup::Roughness => g.roughness[idx] = value,
        ParamGroup::SpecularReflectance => g.f0[idx / 3][idx % 3] = value,
        ParamGroup::DiffuseSh => g.diffuse_sh[idx / 3][idx % 3] = value,
        ParamGroup::IndirectSh => g.indirect_sh[idx / 3][idx % 3] = value,
        ParamGroup::Environment => g.env[idx / 3][idx % 3] = value,
    }
}
