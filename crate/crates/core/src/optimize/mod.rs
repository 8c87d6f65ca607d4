//! Loss assembly, the three-stage fitting schedule, and parameter updates.

pub mod diff;
pub mod gradcheck;
pub mod params;
pub mod ssim;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{AdamState, LearningRates, ParamGroup, SceneGrads, SceneParams, ALL_GROUPS};

use crate::brdf::NdfMode;
use crate::lighting::{light_reg, light_reg_grad, EnvironmentMap};
use crate::math::{Grid, Rgb, Vec3};
use crate::rasterize::{depth_to_normal, Camera};
use crate::raytrace::{precompute_visibility, VisibilityTable};
use crate::scene::View;
use crate::surfel::Surfel;
use diff::{DiffOptions, ForwardFrame, UpstreamGrads};
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("view {0} image size {1}x{2} differs from view 0 ({3}x{4})")]
    InconsistentViews(usize, usize, usize, usize, usize),
}

/// Full training configuration; every field has a sensible default so config
/// files only override what they need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    /// Multiplies every stage length; `0.01` turns 7000/18000/15000 into
    /// 70/180/150.
    pub iters_scale: f64,
    pub learning_rates: LearningRates,
    pub lambda_dssim: f64,
    pub lambda_normal: f64,
    pub lambda_light: f64,
    pub lambda_alpha: f64,
    /// Incident directions per shaded hit.
    pub ns: usize,
    /// Response threshold for visibility proxies.
    pub alpha_min: f64,
    pub seed: u64,
    /// Ablation: isotropic SG NDF instead of the anisotropic warp.
    pub iso_sg: bool,
    /// Ablation: drop the normal-consistency term.
    pub no_normal_loss: bool,
    /// Ablation: single joint stage instead of the phased schedule.
    pub no_phases: bool,
    /// Scene checkpoint cadence in iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Recompute visibility every N iterations during the specular stages;
    /// 0 keeps the table from the stage boundary.
    pub visibility_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iters: 7000,
            stage2_iters: 18000,
            stage3_iters: 15000,
            iters_scale: 1.0,
            learning_rates: LearningRates::default(),
            lambda_dssim: 0.2,
            lambda_normal: 0.05,
            lambda_light: 0.01,
            lambda_alpha: 0.1,
            ns: 64,
            alpha_min: 0.01,
            seed: 0,
            iso_sg: false,
            no_normal_loss: false,
            no_phases: false,
            checkpoint_every: 0,
            visibility_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn scaled_stages(&self) -> (usize, usize, usize) {
        let f = |n: usize| ((n as f64) * self.iters_scale).round() as usize;
        (f(self.stage1_iters), f(self.stage2_iters), f(self.stage3_iters))
    }

    pub fn total_iters(&self) -> usize {
        let (a, b, c) = self.scaled_stages();
        a + b + c
    }

    pub fn ndf_mode(&self) -> NdfMode {
        if self.iso_sg {
            NdfMode::IsoSg
        } else {
            NdfMode::WarpedAsg
        }
    }
}

/// Phase of the schedule a given iteration falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Photometric + alpha, diffuse-only rendering, geometry + diffuse SH.
    Bootstrap,
    /// Full shading, normal regularization added, everything optimized.
    Regularized,
    /// Geometry frozen, visibility precomputed, appearance + light refined.
    Appearance,
    /// The no-phases ablation: everything at once.
    Joint,
}

impl Stage {
    pub fn at(config: &TrainConfig, iter: usize) -> Stage {
        if config.no_phases {
            return Stage::Joint;
        }
        let (s1, s2, _) = config.scaled_stages();
        if iter < s1 {
            Stage::Bootstrap
        } else if iter < s1 + s2 {
            Stage::Regularized
        } else {
            Stage::Appearance
        }
    }

    pub fn diffuse_only(self) -> bool {
        self == Stage::Bootstrap
    }

    pub fn active_groups(self) -> &'static [ParamGroup] {
        match self {
            Stage::Bootstrap => &[
                ParamGroup::Position,
                ParamGroup::Tangents,
                ParamGroup::Scales,
                ParamGroup::Opacity,
                ParamGroup::DiffuseSh,
            ],
            Stage::Regularized | Stage::Joint => &ALL_GROUPS,
            Stage::Appearance => &[
                ParamGroup::Roughness,
                ParamGroup::SpecularReflectance,
                ParamGroup::DiffuseSh,
                ParamGroup::IndirectSh,
                ParamGroup::Environment,
            ],
        }
    }

    fn weights(self, config: &TrainConfig) -> EffectiveWeights {
        let normal = if config.no_normal_loss { 0.0 } else { config.lambda_normal };
        match self {
            Stage::Bootstrap => EffectiveWeights {
                dssim: config.lambda_dssim,
                normal: 0.0,
                light: 0.0,
                alpha: config.lambda_alpha,
            },
            Stage::Regularized => EffectiveWeights {
                dssim: config.lambda_dssim,
                normal,
                light: 0.0,
                alpha: config.lambda_alpha,
            },
            Stage::Appearance => EffectiveWeights {
                dssim: config.lambda_dssim,
                normal: 0.0,
                light: config.lambda_light,
                alpha: 0.0,
            },
            Stage::Joint => EffectiveWeights {
                dssim: config.lambda_dssim,
                normal,
                light: config.lambda_light,
                alpha: config.lambda_alpha,
            },
        }
    }
}

/// Loss weights after stage gating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveWeights {
    pub dssim: f64,
    pub normal: f64,
    pub light: f64,
    pub alpha: f64,
}

impl Default for EffectiveWeights {
    fn default() -> Self {
        EffectiveWeights {
            dssim: 0.2,
            normal: 0.05,
            light: 0.01,
            alpha: 0.1,
        }
    }
}

/// Per-iteration loss record. `total` is the weighted sum of the parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: usize,
    pub total: f64,
    pub photometric: f64,
    pub normal: f64,
    pub light: f64,
    pub alpha: f64,
}

/// Combined L1 + D-SSIM photometric distance.
pub fn photometric_loss(rendered: &Grid<Rgb>, target: &Grid<Rgb>, lambda_dssim: f64) -> f64 {
    assert!(rendered.same_size(target), "photometric image dimensions differ");
    let n = (rendered.data().len() * 3) as f64;
    let mut l1 = 0.0;
    for (a, b) in rendered.data().iter().zip(target.data()) {
        l1 += (a.r - b.r).abs() + (a.g - b.g).abs() + (a.b - b.b).abs();
    }
    l1 /= n;
    (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim::ssim(rendered, target))
}

/// Photometric loss plus its gradient with respect to the rendered image.
pub fn photometric_loss_grad(
    rendered: &Grid<Rgb>,
    target: &Grid<Rgb>,
    lambda_dssim: f64,
) -> (f64, Grid<Rgb>) {
    assert!(rendered.same_size(target), "photometric image dimensions differ");
    let n = (rendered.data().len() * 3) as f64;
    let mut l1 = 0.0;
    let mut grad = Grid::new(rendered.width(), rendered.height(), Rgb::BLACK);
    for ((a, b), g) in rendered
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut())
    {
        for c in 0..3 {
            let d = a[c] - b[c];
            l1 += d.abs();
            g[c] = (1.0 - lambda_dssim) * sign_or_zero(d) / n;
        }
    }
    l1 /= n;
    let (ssim_value, ssim_grad) = ssim::ssim_with_grad(rendered, target);
    for (g, s) in grad.data_mut().iter_mut().zip(ssim_grad.data()) {
        for c in 0..3 {
            g[c] -= lambda_dssim * s[c];
        }
    }
    let value = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim_value);
    (value, grad)
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference between rendered opacity and the mask.
pub fn alpha_loss(opacity: &Grid<f64>, mask: &Grid<f64>) -> f64 {
    assert!(opacity.same_size(mask), "alpha mask dimensions differ");
    let n = opacity.data().len() as f64;
    opacity
        .data()
        .iter()
        .zip(mask.data())
        .map(|(o, m)| (o - m).abs())
        .sum::<f64>()
        / n
}

pub fn alpha_loss_grad(opacity: &Grid<f64>, mask: &Grid<f64>) -> (f64, Grid<f64>) {
    assert!(opacity.same_size(mask), "alpha mask dimensions differ");
    let n = opacity.data().len() as f64;
    let mut value = 0.0;
    let mut grad = Grid::new(opacity.width(), opacity.height(), 0.0);
    for ((o, m), g) in opacity.data().iter().zip(mask.data()).zip(grad.data_mut()) {
        let d = o - m;
        value += d.abs();
        *g = sign_or_zero(d) / n;
    }
    (value / n, grad)
}

/// Normal-consistency loss: per valid pixel (opacity >= 0.5), the
/// blend-weighted disagreement between camera-facing splat normals and the
/// depth-gradient normal, averaged over valid pixels.
pub fn normal_loss(frame: &ForwardFrame) -> f64 {
    normal_loss_impl(frame, None).0
}

/// Normal loss and its contributions to the upstream gradients (per-hit
/// weight/normal terms plus the chain through the depth map).
pub fn normal_loss_grad(frame: &ForwardFrame, upstream: &mut UpstreamGrads) -> f64 {
    normal_loss_impl(frame, Some(upstream)).0
}

fn normal_loss_impl(frame: &ForwardFrame, mut upstream: Option<&mut UpstreamGrads>) -> (f64,) {
    let camera = &frame.camera;
    let width = camera.width;
    let height = camera.height;
    let normals = depth_to_normal(&frame.buffers.depth, camera);
    let valid: Vec<bool> = frame
        .buffers
        .opacity
        .data()
        .iter()
        .map(|&o| o >= 0.5)
        .collect();
    let count = valid.iter().filter(|v| **v).count();
    if count == 0 {
        return (0.0,);
    }
    let inv = 1.0 / count as f64;
    if let Some(up) = upstream.as_deref_mut() {
        up.ensure_hit_slots(frame);
    }

    let mut value = 0.0;
    // dL/dN per pixel, fed back through the finite-difference chain.
    let mut d_n_grid = Grid::new(width, height, Vec3::ZERO);
    for y in 0..height {
        for x in 0..width {
            let pix = y * width + x;
            if !valid[pix] {
                continue;
            }
            let n_est = *normals.get(x, y);
            let recs = &frame.records[pix];
            let mut d_n = Vec3::ZERO;
            for (i, rec) in recs.iter().enumerate() {
                let splat_n = frame.normals[rec.surfel as usize].1 * rec.flip;
                let term = 1.0 - splat_n.dot(n_est);
                value += rec.weight * term;
                if let Some(up) = upstream.as_deref_mut() {
                    up.d_hits[pix][i].d_weight += term * inv;
                    up.d_hits[pix][i].d_normal_flipped -= n_est * (rec.weight * inv);
                }
                d_n -= splat_n * (rec.weight * inv);
            }
            d_n_grid.set(x, y, d_n);
        }
    }
    if let Some(up) = upstream.as_deref_mut() {
        depth_normal_backward(&frame.buffers.depth, camera, &d_n_grid, &mut up.d_depth);
    }
    (value * inv,)
}

/// Chain dL/dN through `depth_to_normal` into dL/ddepth. Mirrors the forward
/// stencil exactly (central interior, one-sided borders, camera-facing
/// orientation).
fn depth_normal_backward(
    depth: &Grid<f64>,
    camera: &Camera,
    d_n_world: &Grid<Vec3>,
    d_depth: &mut Grid<f64>,
) {
    let w = depth.width();
    let h = depth.height();
    let rot = camera.rotation_mat();
    let k_dir = |x: usize, y: usize| {
        Vec3 {
            x: (x as f64 + 0.5 - camera.cx) / camera.fx,
            y: (y as f64 + 0.5 - camera.cy) / camera.fy,
            z: 1.0,
        }
    };
    for y in 0..h {
        for x in 0..w {
            let upstream = *d_n_world.get(x, y);
            if upstream == Vec3::ZERO {
                continue;
            }
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            if x1 == x0 || y1 == y0 {
                continue;
            }
            let q = |px: usize, py: usize| k_dir(px, py) * *depth.get(px, py);
            let dx = (x1 - x0) as f64;
            let dy = (y1 - y0) as f64;
            let gx = (q(x1, y) - q(x0, y)) / dx;
            let gy = (q(x, y1) - q(x, y0)) / dy;
            let cross = gx.cross(gy);
            let len = cross.norm();
            if len < 1e-12 {
                continue;
            }
            let u = cross / len;
            let sign = if u.z > 0.0 { -1.0 } else { 1.0 };
            // N_world = R^T (sign * u)
            let d_u = rot.mul_vec(upstream) * sign;
            let d_cross = (d_u - u * u.dot(d_u)) / len;
            let d_gx = gy.cross(d_cross);
            let d_gy = d_cross.cross(gx);
            // gx = (q(x1,y) - q(x0,y)) / dx, q = depth * K.
            *d_depth.get_mut(x1, y) += k_dir(x1, y).dot(d_gx) / dx;
            *d_depth.get_mut(x0, y) -= k_dir(x0, y).dot(d_gx) / dx;
            *d_depth.get_mut(x, y1) += k_dir(x, y1).dot(d_gy) / dy;
            *d_depth.get_mut(x, y0) -= k_dir(x, y0).dot(d_gy) / dy;
        }
    }
}

/// Assembled per-iteration losses plus every gradient needed for a step.
pub struct LossBundle {
    pub report: LossReport,
    pub upstream: UpstreamGrads,
    /// Natural-space environment gradient of the light regularizer (already
    /// weighted).
    pub env_reg_grad: Vec<Rgb>,
}

/// Compute the stage-gated losses and their upstream gradients for a frame.
pub fn compute_losses(
    frame: &ForwardFrame,
    target: &Grid<Rgb>,
    mask: Option<&Grid<f64>>,
    env: &EnvironmentMap,
    weights: &EffectiveWeights,
) -> LossBundle {
    let width = frame.camera.width;
    let height = frame.camera.height;
    let mut upstream = UpstreamGrads::zeros(width, height);

    let (photo, photo_grad) = photometric_loss_grad(&frame.buffers.color, target, weights.dssim);
    upstream.d_color = photo_grad;

    let mut alpha_value = 0.0;
    if weights.alpha > 0.0 {
        if let Some(mask) = mask {
            let (value, grad) = alpha_loss_grad(&frame.buffers.opacity, mask);
            alpha_value = value;
            for (dst, g) in upstream.d_opacity.data_mut().iter_mut().zip(grad.data()) {
                *dst += weights.alpha * g;
            }
        }
    }

    let mut normal_value = 0.0;
    if weights.normal > 0.0 {
        let mut normal_upstream = UpstreamGrads::zeros(width, height);
        normal_value = normal_loss_grad(frame, &mut normal_upstream);
        upstream.ensure_hit_slots(frame);
        for (dst, src) in upstream.d_hits.iter_mut().zip(&normal_upstream.d_hits) {
            for (d, s) in dst.iter_mut().zip(src) {
                d.d_weight += weights.normal * s.d_weight;
                d.d_normal_flipped += s.d_normal_flipped * weights.normal;
            }
        }
        for (dst, src) in upstream
            .d_depth
            .data_mut()
            .iter_mut()
            .zip(normal_upstream.d_depth.data())
        {
            *dst += weights.normal * src;
        }
    }

    let mut light_value = 0.0;
    let mut env_reg_grad = vec![Rgb::BLACK; env.texels().len()];
    if weights.light > 0.0 {
        light_value = light_reg(env);
        for (dst, g) in env_reg_grad.iter_mut().zip(light_reg_grad(env)) {
            *dst = g * weights.light;
        }
    }

    let total = photo
        + weights.normal * normal_value
        + weights.light * light_value
        + weights.alpha * alpha_value;
    LossBundle {
        report: LossReport {
            iteration: 0,
            total,
            photometric: photo,
            normal: normal_value,
            light: light_value,
            alpha: alpha_value,
        },
        upstream,
        env_reg_grad,
    }
}

pub struct TrainResult {
    pub surfels: Vec<Surfel>,
    pub environment: EnvironmentMap,
    pub history: Vec<LossReport>,
}

/// Run the phased fit. Deterministic for a fixed config, seed and dataset.
pub fn train(
    surfels0: &[Surfel],
    env0: &EnvironmentMap,
    views: &[View],
    config: &TrainConfig,
    mut checkpoint: Option<&mut dyn FnMut(usize, &[Surfel], &EnvironmentMap)>,
) -> Result<TrainResult, TrainError> {
    if views.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (w0, h0) = (views[0].image.width(), views[0].image.height());
    for (i, v) in views.iter().enumerate() {
        if v.image.width() != w0 || v.image.height() != h0 {
            return Err(TrainError::InconsistentViews(
                i,
                v.image.width(),
                v.image.height(),
                w0,
                h0,
            ));
        }
    }

    let mut params = SceneParams::from_scene(surfels0, env0);
    let mut adam = AdamState::new(surfels0.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.total_iters());
    let mut visibility: Option<VisibilityTable> = None;
    let mut prev_stage: Option<Stage> = None;

    let total = config.total_iters();
    for iter in 0..total {
        let stage = Stage::at(config, iter);
        let surfels = params.surfels();
        let env = params.environment();

        // Visibility policy: recomputed at the frozen-geometry stage
        // boundary, optionally refreshed during the specular stages.
        let needs_specular = !stage.diffuse_only();
        if needs_specular {
            let stage_entry = prev_stage != Some(stage);
            let refresh = config.visibility_every > 0 && iter % config.visibility_every.max(1) == 0;
            let first_specular = visibility.is_none();
            if (stage == Stage::Appearance && stage_entry)
                || (stage == Stage::Joint && first_specular)
                || refresh
            {
                visibility = Some(precompute_visibility(&surfels, config.ns, config.alpha_min));
            }
        }
        prev_stage = Some(stage);

        let view = &views[rng.gen_range(0..views.len())];
        let opts = DiffOptions {
            ns: config.ns,
            mode: config.ndf_mode(),
            diffuse_only: stage.diffuse_only(),
        };
        let vis_ref = if needs_specular { visibility.as_ref() } else { None };
        let frame = diff::forward(&surfels, &view.camera, &env, vis_ref, &opts);
        let weights = stage.weights(config);
        let bundle = compute_losses(&frame, &view.image, view.mask.as_ref(), &env, &weights);

        let mut grads = diff::backward(&frame, &bundle.upstream);
        for (dst, g) in grads.env.iter_mut().zip(&bundle.env_reg_grad) {
            *dst += *g;
        }
        let raw = grads.to_raw(&params);
        adam.step(&mut params, &raw, &config.learning_rates, stage.active_groups());
        params.orthonormalize_tangents();

        let mut report = bundle.report;
        report.iteration = iter;
        history.push(report);
        log::debug!(
            "iter {iter} stage {stage:?} total {:.6} photo {:.6}",
            report.total,
            report.photometric
        );

        if config.checkpoint_every > 0 && (iter + 1) % config.checkpoint_every == 0 {
            if let Some(sink) = checkpoint.as_deref_mut() {
                sink(iter + 1, &params.surfels(), &params.environment());
            }
        }
    }

    Ok(TrainResult {
        surfels: params.surfels(),
        environment: params.environment(),
        history,
    })
}

/// Peak signal-to-noise ratio between two images in [0,1].
pub fn psnr(a: &Grid<Rgb>, b: &Grid<Rgb>) -> f64 {
    assert!(a.same_size(b), "psnr image dimensions differ");
    let n = (a.data().len() * 3) as f64;
    let mut mse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        for c in 0..3 {
            let d = x[c].clamp(0.0, 1.0) - y[c].clamp(0.0, 1.0);
            mse += d * d;
        }
    }
    mse /= n;
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{rgb, vec3};
    use crate::surfel::sphere_surfels;

    fn small_frame(diffuse_only: bool) -> (ForwardFrame, EnvironmentMap) {
        let mut surfels = sphere_surfels(16, 0.8, rgb(0.45, 0.35, 0.3), 0.35);
        for s in &mut surfels {
            s.position.z += 3.0;
        }
        let cam = Camera::look_at(Vec3::ZERO, vec3(0.0, 0.0, 3.0), Vec3::Y, 20.0, 24, 24);
        let env = EnvironmentMap::constant(rgb(0.4, 0.45, 0.5));
        let opts = DiffOptions {
            ns: 16,
            diffuse_only,
            ..DiffOptions::default()
        };
        (diff::forward(&surfels, &cam, &env, None, &opts), env)
    }

    #[test]
    fn photometric_identical_is_zero() {
        let (frame, _) = small_frame(true);
        let img = frame.buffers.color.clone();
        assert_eq!(photometric_loss(&img, &img, 0.2), 0.0);
    }

    #[test]
    fn photometric_constant_offset_l1() {
        let a = Grid::new(16, 16, Rgb::splat(0.5));
        let b = Grid::new(16, 16, Rgb::splat(0.6));
        let loss = photometric_loss(&a, &b, 0.2);
        // Constant images: contrast/structure terms cancel, only the
        // luminance term of SSIM differs from 1.
        let c1 = 0.01 * 0.01;
        let lum = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        let expect = 0.8 * 0.1 + 0.2 * (1.0 - lum);
        assert!((loss - expect).abs() < 1e-12, "loss {loss} vs {expect}");
        let l1_only = photometric_loss(&a, &b, 0.0);
        assert!((l1_only - 0.1).abs() < 1e-12);
    }

    #[test]
    fn photometric_l1_symmetry() {
        let mut a = Grid::new(12, 12, Rgb::splat(0.3));
        let mut b = Grid::new(12, 12, Rgb::splat(0.4));
        a.set(3, 4, rgb(0.9, 0.1, 0.2));
        b.set(8, 2, rgb(0.0, 0.7, 0.3));
        assert!((photometric_loss(&a, &b, 0.0) - photometric_loss(&b, &a, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn photometric_grad_matches_fd() {
        let (frame, _) = small_frame(true);
        let rendered = frame.buffers.color.clone();
        let mut target = rendered.clone();
        // Perturb the target so gradients are non-trivial.
        for (i, px) in target.data_mut().iter_mut().enumerate() {
            px.r = (px.r + 0.1 + 0.01 * (i % 7) as f64).min(1.0);
            px.g = (px.g + 0.05).min(1.0);
        }
        let (_, grad) = photometric_loss_grad(&rendered, &target, 0.2);
        let eps = 1e-6;
        for (x, y, c) in [(12usize, 12usize, 0usize), (5, 18, 1), (20, 7, 2)] {
            let mut plus = rendered.clone();
            plus.get_mut(x, y)[c] += eps;
            let mut minus = rendered.clone();
            minus.get_mut(x, y)[c] -= eps;
            let fd = (photometric_loss(&plus, &target, 0.2)
                - photometric_loss(&minus, &target, 0.2))
                / (2.0 * eps);
            let an = grad.get(x, y)[c];
            assert!((fd - an).abs() < 1e-6 + 1e-3 * fd.abs(), "fd {fd} vs {an}");
        }
    }

    #[test]
    fn alpha_loss_examples() {
        let o = Grid::new(8, 8, 0.0);
        let m = Grid::new(8, 8, 1.0);
        assert_eq!(alpha_loss(&o, &o), 0.0);
        assert_eq!(alpha_loss(&o, &m), 1.0);
        let mut half = Grid::new(8, 8, 0.0);
        for y in 0..8 {
            for x in 0..4 {
                half.set(x, y, 1.0);
            }
        }
        assert_eq!(alpha_loss(&o, &half), 0.5);
    }

    #[test]
    fn normal_loss_zero_on_frontoparallel_plane() {
        // A plane of coplanar surfels covering the whole view: splat normals
        // agree with the depth-gradient normal at every valid pixel. The
        // plane must fill the image so no silhouette pixels pollute the
        // finite-difference normals.
        let mut surfels = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                let mut s = Surfel::plain(
                    vec3((i as f64 - 3.0) * 0.7, (j as f64 - 3.0) * 0.7, 3.0),
                    0.8,
                    0.98,
                );
                s.diffuse_sh[0] = Rgb::splat(0.5 / crate::brdf::sh::SH_C0);
                surfels.push(s);
            }
        }
        // Narrow view that stays well inside the plane.
        let cam = Camera::look_at(Vec3::ZERO, vec3(0.0, 0.0, 3.0), Vec3::Y, 60.0, 32, 32);
        let opts = DiffOptions {
            diffuse_only: true,
            ..DiffOptions::default()
        };
        let env = EnvironmentMap::constant(Rgb::BLACK);
        let frame = diff::forward(&surfels, &cam, &env, None, &opts);
        // Every pixel should be fully covered.
        assert!(frame.buffers.opacity.data().iter().all(|&o| o > 0.5));
        let loss = normal_loss(&frame);
        assert!(loss.abs() < 1e-6, "planar scene normal loss {loss}");
    }

    #[test]
    fn normal_loss_matches_bruteforce() {
        let (frame, _) = small_frame(false);
        let loss = normal_loss(&frame);
        // Independent accumulation straight from the definition.
        let normals = depth_to_normal(&frame.buffers.depth, &frame.camera);
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..frame.camera.height {
            for x in 0..frame.camera.width {
                if *frame.buffers.opacity.get(x, y) < 0.5 {
                    continue;
                }
                count += 1;
                for rec in &frame.records[y * frame.camera.width + x] {
                    let n = frame.normals[rec.surfel as usize].1 * rec.flip;
                    acc += rec.weight * (1.0 - n.dot(*normals.get(x, y)));
                }
            }
        }
        let expect = if count == 0 { 0.0 } else { acc / count as f64 };
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn loss_report_total_is_weighted_sum() {
        let (frame, env) = small_frame(false);
        let mut target = frame.buffers.color.clone();
        for px in target.data_mut() {
            px.r += 0.1;
        }
        let mask = Grid::new(frame.camera.width, frame.camera.height, 0.7);
        let weights = EffectiveWeights::default();
        let bundle = compute_losses(&frame, &target, Some(&mask), &env, &weights);
        let r = bundle.report;
        let recomposed = r.photometric
            + weights.normal * r.normal
            + weights.light * r.light
            + weights.alpha * r.alpha;
        assert!((r.total - recomposed).abs() < 1e-9);
        assert!(r.normal > 0.0 || r.alpha > 0.0);
    }

    #[test]
    fn stage_schedule_and_gating() {
        let config = TrainConfig {
            iters_scale: 0.01,
            ..TrainConfig::default()
        };
        let (s1, s2, s3) = config.scaled_stages();
        assert_eq!((s1, s2, s3), (70, 180, 150));
        assert_eq!(Stage::at(&config, 0), Stage::Bootstrap);
        assert_eq!(Stage::at(&config, 69), Stage::Bootstrap);
        assert_eq!(Stage::at(&config, 70), Stage::Regularized);
        assert_eq!(Stage::at(&config, 249), Stage::Regularized);
        assert_eq!(Stage::at(&config, 250), Stage::Appearance);
        // Normal loss contributes nothing in stage 1.
        assert_eq!(Stage::Bootstrap.weights(&config).normal, 0.0);
        // Geometry groups are frozen in stage 3.
        assert!(!Stage::Appearance
            .active_groups()
            .contains(&ParamGroup::Position));
        let joint = TrainConfig {
            no_phases: true,
            ..config
        };
        assert_eq!(Stage::at(&joint, 5), Stage::Joint);
    }

    #[test]
    fn psnr_basics() {
        let a = Grid::new(4, 4, Rgb::splat(0.5));
        let mut b = a.clone();
        assert_eq!(psnr(&a, &b), f64::INFINITY);
        for px in b.data_mut() {
            px.r += 0.1;
        }
        let expect = -10.0 * ((0.1f64 * 0.1) / 3.0).log10();
        assert!((psnr(&a, &b) - expect).abs() < 1e-9);
    }
}
