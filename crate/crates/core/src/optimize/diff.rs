//! Differentiable rendering: a forward pass that keeps per-pixel hit records
//! plus per-surfel shading caches, and the matching hand-written backward
//! pass producing gradients for every scene parameter.
//!
//! Gradient conventions: all results are in natural parameter space (scale,
//! opacity, roughness, reflectance, environment radiance as values, not raw
//! coordinates); `SceneGrads::to_raw` chains the reparameterizations.
//! Clamp/cutoff gates (diffuse and indirect clamps, cosine clamps, the alpha
//! skip and 3-sigma cutoffs) pass zero gradient on their inactive side.

use crate::brdf::{
    self, hemisphere_weight, sh, NdfMode, SpecularFactorsGrad,
};
use crate::lighting::{env_sample_full, EnvironmentMap};
use crate::math::{solve3, Grid, Rgb, Vec3};
use crate::rasterize::{
    gather_hits, splat_alpha, Camera, RenderBuffers, ALPHA_SKIP, TRANSMITTANCE_STOP,
};
use crate::raytrace::{SurfelBvh, VisibilityTable};
use crate::surfel::{eval_kernel, Surfel, INDIRECT_SH_COEFFS};
use rayon::prelude::*;

use super::params::SceneGrads;

/// Rows per deterministic reduction chunk in the backward pass. Fixed so the
/// floating-point accumulation order never depends on the thread count.
const BAND_ROWS: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct DiffOptions {
    pub ns: usize,
    pub mode: NdfMode,
    pub diffuse_only: bool,
}

impl Default for DiffOptions {
    fn default() -> Self {
        DiffOptions {
            ns: 64,
            mode: NdfMode::WarpedAsg,
            diffuse_only: false,
        }
    }
}

/// One composited splat: everything the backward pass needs to replay the
/// blend without re-intersecting.
#[derive(Debug, Clone, Copy)]
pub struct HitRecord {
    pub surfel: u32,
    pub t: f64,
    pub u: f64,
    pub v: f64,
    pub alpha: f64,
    /// T_i alpha_i, the blend weight.
    pub weight: f64,
    /// Transmittance before this splat.
    pub trans: f64,
    /// Sign orienting the splat normal toward the camera.
    pub flip: f64,
}

/// Per-surfel shading cache shared across every hit of that surfel.
pub struct SurfelCache {
    pub normal_raw: Vec3,
    pub normal: Vec3,
    /// Rotated hemisphere directions.
    pub dirs: Vec<Vec3>,
    /// Incident radiance L_k per direction.
    pub light: Vec<Rgb>,
    /// (dir . n) * 2 pi / ns per direction; treated as constant in the
    /// backward pass (the rotation keeps it identically equal to the
    /// canonical lattice cosine).
    pub cosw: Vec<f64>,
    /// L_k * cosw, the weight the forward product actually uses.
    pub weighted: Vec<Rgb>,
    pub vis: Vec<f64>,
    pub env_taps: Vec<[(usize, usize, f64); 4]>,
    pub env_ddir: Vec<[Vec3; 3]>,
    pub ind_basis: Vec<[f64; INDIRECT_SH_COEFFS]>,
    pub ind_basis_grad: Vec<[Vec3; INDIRECT_SH_COEFFS]>,
    /// Per-channel gate of the indirect clamp (pre-clamp value > 0).
    pub ind_gate: Vec<[bool; 3]>,
}

pub struct ForwardFrame {
    pub buffers: RenderBuffers,
    pub records: Vec<Vec<HitRecord>>,
    pub surfels: Vec<Surfel>,
    pub camera: Camera,
    pub opts: DiffOptions,
    /// Unnormalized and unit normals per surfel (always present).
    pub normals: Vec<(Vec3, Vec3)>,
    /// Shading caches; absent in diffuse-only mode.
    pub caches: Option<Vec<SurfelCache>>,
}

fn build_cache(
    surfel: &Surfel,
    env: &EnvironmentMap,
    vis_row: Option<&[f64]>,
    ns: usize,
) -> SurfelCache {
    let normal_raw = surfel.tangent_u.cross(surfel.tangent_v);
    let normal = normal_raw.normalized();
    let dirs = brdf::fibonacci_dirs(ns, normal);
    let w = hemisphere_weight(ns);
    let mut cache = SurfelCache {
        normal_raw,
        normal,
        dirs: Vec::with_capacity(ns),
        light: Vec::with_capacity(ns),
        cosw: Vec::with_capacity(ns),
        weighted: Vec::with_capacity(ns),
        vis: Vec::with_capacity(ns),
        env_taps: Vec::with_capacity(ns),
        env_ddir: Vec::with_capacity(ns),
        ind_basis: Vec::with_capacity(ns),
        ind_basis_grad: Vec::with_capacity(ns),
        ind_gate: Vec::with_capacity(ns),
    };
    for (k, dir) in dirs.iter().enumerate() {
        let vis = vis_row.map_or(1.0, |row| row[k]);
        let env_s = env_sample_full(env, *dir);
        let mut basis = [0.0; INDIRECT_SH_COEFFS];
        let mut basis_grad = [Vec3::ZERO; INDIRECT_SH_COEFFS];
        sh::eval_basis_with_grad(*dir, &mut basis, &mut basis_grad);
        let mut indirect = Rgb::BLACK;
        for (c, b) in surfel.indirect_sh.iter().zip(basis.iter()) {
            indirect += *c * *b;
        }
        let gate = [indirect.r > 0.0, indirect.g > 0.0, indirect.b > 0.0];
        let li = env_s.value * vis + indirect.clamp_non_negative();
        let cosw = dir.dot(normal) * w;
        cache.light.push(li);
        cache.cosw.push(cosw);
        cache.weighted.push(li * cosw);
        cache.vis.push(vis);
        cache.env_taps.push(env_s.taps);
        cache.env_ddir.push(env_s.d_dir);
        cache.ind_basis.push(basis);
        cache.ind_basis_grad.push(basis_grad);
        cache.ind_gate.push(gate);
    }
    cache.dirs = dirs;
    cache
}

fn specular_from_cache(
    surfel: &Surfel,
    wo: Vec3,
    cache: &SurfelCache,
    mode: NdfMode,
) -> Rgb {
    let mut acc = Rgb::BLACK;
    for (dir, lw) in cache.dirs.iter().zip(cache.weighted.iter()) {
        let f = brdf::specular_factors(wo, *dir, cache.normal, surfel.roughness, mode);
        if f.s_geo != 0.0 {
            acc += brdf::specular_apply(&f, surfel.specular_reflectance) * *lw;
        }
    }
    acc
}

/// Forward render with records. Produces buffers identical to
/// `rasterize::render` for the same inputs.
pub fn forward(
    surfels: &[Surfel],
    camera: &Camera,
    env: &EnvironmentMap,
    visibility: Option<&VisibilityTable>,
    opts: &DiffOptions,
) -> ForwardFrame {
    let width = camera.width;
    let height = camera.height;
    let normals: Vec<(Vec3, Vec3)> = surfels
        .iter()
        .map(|s| {
            let raw = s.tangent_u.cross(s.tangent_v);
            (raw, raw.normalized())
        })
        .collect();
    let caches: Option<Vec<SurfelCache>> = if opts.diffuse_only {
        None
    } else {
        Some(
            (0..surfels.len())
                .map(|i| {
                    let row = visibility.map(|v| v.row(i));
                    build_cache(&surfels[i], env, row, opts.ns)
                })
                .collect(),
        )
    };

    let mut buffers = RenderBuffers::new(width, height);
    let mut records = vec![Vec::new(); width * height];
    if surfels.is_empty() {
        return ForwardFrame {
            buffers,
            records,
            surfels: surfels.to_vec(),
            camera: camera.clone(),
            opts: *opts,
            normals,
            caches,
        };
    }

    let bvh = SurfelBvh::build(surfels, ALPHA_SKIP);
    let rows: Vec<Vec<(PixelOut, Vec<HitRecord>)>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut hits = Vec::new();
            (0..width)
                .map(|x| {
                    let ray = camera
                        .pixel_ray(x as f64 + 0.5, y as f64 + 0.5)
                        .expect("pixel centers are in bounds");
                    let dirz = camera.dir_camera_z(ray.dir);
                    gather_hits(&ray, surfels, &bvh, &mut hits);
                    let wo = -ray.dir;
                    let mut out = PixelOut::default();
                    let mut recs = Vec::new();
                    let mut trans = 1.0;
                    for hit in &hits {
                        if trans < TRANSMITTANCE_STOP {
                            break;
                        }
                        let idx = hit.surfel;
                        let surfel = &surfels[idx];
                        let alpha = splat_alpha(surfel, hit.u, hit.v);
                        if alpha < ALPHA_SKIP {
                            continue;
                        }
                        let normal = normals[idx].1;
                        let mut color = brdf::diffuse_color(surfel, wo);
                        if let Some(caches) = &caches {
                            if wo.dot(normal) > 0.0 {
                                color += specular_from_cache(surfel, wo, &caches[idx], opts.mode);
                            }
                        }
                        let flip = if normal.dot(ray.dir) > 0.0 { -1.0 } else { 1.0 };
                        let w = trans * alpha;
                        out.color += color * w;
                        out.depth += hit.t * dirz * w;
                        out.normal += normal * (flip * w);
                        out.opacity += w;
                        recs.push(HitRecord {
                            surfel: idx as u32,
                            t: hit.t,
                            u: hit.u,
                            v: hit.v,
                            alpha,
                            weight: w,
                            trans,
                            flip,
                        });
                        trans *= 1.0 - alpha;
                    }
                    if out.opacity > 0.0 {
                        out.depth /= out.opacity;
                    }
                    (out, recs)
                })
                .collect()
        })
        .collect();

    for (y, row) in rows.into_iter().enumerate() {
        for (x, (px, recs)) in row.into_iter().enumerate() {
            buffers.color.set(x, y, px.color);
            buffers.depth.set(x, y, px.depth);
            buffers.normal.set(x, y, px.normal);
            buffers.opacity.set(x, y, px.opacity);
            records[y * width + x] = recs;
        }
    }

    ForwardFrame {
        buffers,
        records,
        surfels: surfels.to_vec(),
        camera: camera.clone(),
        opts: *opts,
        normals,
        caches,
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PixelOut {
    color: Rgb,
    depth: f64,
    normal: Vec3,
    opacity: f64,
}

/// Structural signature of a frame: which (pixel, surfel) pairs got
/// composited, their orientation signs, and which pixels pass the
/// normal-loss validity gate. A finite-difference probe whose endpoints
/// disagree on this signature straddles one of the forward model's cutoff
/// discontinuities (3-sigma gather, alpha skip, early stop, facing flips),
/// where no derivative exists to check.
pub fn structure_signature(frame: &ForwardFrame) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    let mut eat = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(FNV_PRIME);
    };
    for (pix, recs) in frame.records.iter().enumerate() {
        if recs.is_empty() {
            continue;
        }
        eat(pix as u64 + 1);
        for rec in recs {
            eat(((rec.surfel as u64) << 1) | ((rec.flip > 0.0) as u64));
        }
    }
    for (i, &o) in frame.buffers.opacity.data().iter().enumerate() {
        if o >= 0.5 {
            eat((i as u64) | (1 << 40));
        }
    }
    h
}

/// Loss gradients flowing back into the frame.
pub struct UpstreamGrads {
    pub d_color: Grid<Rgb>,
    pub d_depth: Grid<f64>,
    pub d_opacity: Grid<f64>,
    /// Per pixel, aligned with `ForwardFrame::records`; empty when a loss has
    /// no per-splat terms.
    pub d_hits: Vec<Vec<HitUpstream>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HitUpstream {
    pub d_weight: f64,
    pub d_normal_flipped: Vec3,
}

impl UpstreamGrads {
    pub fn zeros(width: usize, height: usize) -> UpstreamGrads {
        UpstreamGrads {
            d_color: Grid::new(width, height, Rgb::BLACK),
            d_depth: Grid::new(width, height, 0.0),
            d_opacity: Grid::new(width, height, 0.0),
            d_hits: vec![Vec::new(); width * height],
        }
    }

    pub fn ensure_hit_slots(&mut self, frame: &ForwardFrame) {
        for (slot, recs) in self.d_hits.iter_mut().zip(frame.records.iter()) {
            if slot.len() != recs.len() {
                slot.resize(recs.len(), HitUpstream::default());
            }
        }
    }
}

/// Partial gradients accumulated by one pixel band.
struct BandAccum {
    grads: SceneGrads,
    /// d loss / d (L_k cosw), per surfel per direction.
    d_weighted: Vec<Rgb>,
    /// d loss / d omega_k, per surfel per direction.
    d_dir: Vec<Vec3>,
    /// d loss / d unit-normal, per surfel.
    d_normal: Vec<Vec3>,
}

impl BandAccum {
    fn zeros(n_surfels: usize, ns: usize) -> BandAccum {
        BandAccum {
            grads: SceneGrads::zeros(n_surfels),
            d_weighted: vec![Rgb::BLACK; n_surfels * ns],
            d_dir: vec![Vec3::ZERO; n_surfels * ns],
            d_normal: vec![Vec3::ZERO; n_surfels],
        }
    }

    fn merge(&mut self, other: &BandAccum) {
        self.grads.accumulate(&other.grads);
        for (a, b) in self.d_weighted.iter_mut().zip(&other.d_weighted) {
            *a += *b;
        }
        for (a, b) in self.d_dir.iter_mut().zip(&other.d_dir) {
            *a += *b;
        }
        for (a, b) in self.d_normal.iter_mut().zip(&other.d_normal) {
            *a += *b;
        }
    }
}

/// Backward pass: scene gradients in natural space.
pub fn backward(frame: &ForwardFrame, upstream: &UpstreamGrads) -> SceneGrads {
    let n = frame.surfels.len();
    let ns = frame.opts.ns;
    let width = frame.camera.width;
    let height = frame.camera.height;
    assert!(upstream.d_color.width() == width && upstream.d_color.height() == height);

    let n_bands = height.div_ceil(BAND_ROWS);
    let mut bands: Vec<BandAccum> = (0..n_bands)
        .into_par_iter()
        .map(|band| {
            let y0 = band * BAND_ROWS;
            let y1 = ((band + 1) * BAND_ROWS).min(height);
            let mut acc = BandAccum::zeros(n, ns);
            for y in y0..y1 {
                for x in 0..width {
                    backward_pixel(frame, upstream, x, y, &mut acc);
                }
            }
            acc
        })
        .collect();

    let mut total = bands.remove(0);
    for band in &bands {
        total.merge(band);
    }

    finalize_surfel_chains(frame, &mut total);
    total.grads
}

fn backward_pixel(
    frame: &ForwardFrame,
    upstream: &UpstreamGrads,
    x: usize,
    y: usize,
    acc: &mut BandAccum,
) {
    let pix = y * frame.camera.width + x;
    let recs = &frame.records[pix];
    if recs.is_empty() {
        return;
    }
    let camera = &frame.camera;
    let ray = camera
        .pixel_ray(x as f64 + 0.5, y as f64 + 0.5)
        .expect("pixel centers are in bounds");
    let dirz = camera.dir_camera_z(ray.dir);
    let wo = -ray.dir;
    let d_color = *upstream.d_color.get(x, y);
    let d_depth = *upstream.d_depth.get(x, y);
    let d_opacity = *upstream.d_opacity.get(x, y);
    let hit_up = &upstream.d_hits[pix];

    // Per-hit colors are recomputed once: needed both for the alpha adjoint
    // and to avoid storing shaded colors in the records.
    let mut colors = Vec::with_capacity(recs.len());
    for rec in recs {
        let idx = rec.surfel as usize;
        let surfel = &frame.surfels[idx];
        let normal = frame.normals[idx].1;
        let mut color = brdf::diffuse_color(surfel, wo);
        if let Some(caches) = &frame.caches {
            if wo.dot(normal) > 0.0 {
                color += specular_from_cache(surfel, wo, &caches[idx], frame.opts.mode);
            }
        }
        colors.push(color);
    }

    // Weight adjoints G_i = dL/dw_i; the depth buffer is the normalized mean
    // depth = sum(w z)/sum(w), so weights pick up a (z_i - depth)/W term.
    let depth_final = *frame.buffers.depth.get(x, y);
    let w_total = *frame.buffers.opacity.get(x, y);
    let weight_adj: Vec<f64> = recs
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let direct = if hit_up.is_empty() { 0.0 } else { hit_up[i].d_weight };
            let c = colors[i];
            c.r * d_color.r + c.g * d_color.g + c.b * d_color.b
                + (rec.t * dirz - depth_final) / w_total * d_depth
                + d_opacity
                + direct
        })
        .collect();

    // Alpha adjoints via the suffix trick:
    // dL/da_i = T_i G_i - sum_{j>i} w_j G_j / (1 - a_i).
    let mut suffix = 0.0;
    let mut alpha_adj = vec![0.0; recs.len()];
    for i in (0..recs.len()).rev() {
        let rec = &recs[i];
        alpha_adj[i] = rec.trans * weight_adj[i] - suffix / (1.0 - rec.alpha);
        suffix += rec.weight * weight_adj[i];
    }

    for (i, rec) in recs.iter().enumerate() {
        let idx = rec.surfel as usize;
        let surfel = &frame.surfels[idx];
        let normal = frame.normals[idx].1;

        // --- shading color -------------------------------------------------
        let d_c = d_color * rec.weight;
        // Diffuse SH behind its clamp gate.
        let mut basis16 = [0.0; sh::MAX_COEFFS];
        sh::eval_basis(wo, &mut basis16[..surfel.diffuse_sh.len()]);
        let mut pre = Rgb::BLACK;
        for (c, b) in surfel.diffuse_sh.iter().zip(basis16.iter()) {
            pre += *c * *b;
        }
        for ch in 0..3 {
            if pre[ch] > 0.0 && d_c[ch] != 0.0 {
                for (m, b) in basis16[..surfel.diffuse_sh.len()].iter().enumerate() {
                    acc.grads.diffuse_sh[idx * surfel.diffuse_sh.len() + m][ch] += d_c[ch] * b;
                }
            }
        }
        // Specular.
        if let Some(caches) = &frame.caches {
            if wo.dot(normal) > 0.0 {
                let cache = &caches[idx];
                let f0 = surfel.specular_reflectance;
                for k in 0..frame.opts.ns {
                    let g: SpecularFactorsGrad = brdf::specular_factors_grad(
                        wo,
                        cache.dirs[k],
                        normal,
                        surfel.roughness,
                        frame.opts.mode,
                    );
                    if g.f.s_geo == 0.0 {
                        continue;
                    }
                    let s_geo = g.f.s_geo;
                    let q = (1.0 - g.f.fres_u).powi(5);
                    let dq_du = -5.0 * (1.0 - g.f.fres_u).powi(4);
                    let lw = cache.weighted[k];
                    let mut d_s = 0.0;
                    let mut d_q = 0.0;
                    let mut d_lw = Rgb::BLACK;
                    for ch in 0..3 {
                        let fres = f0[ch] + (1.0 - f0[ch]) * q;
                        let up = d_c[ch] * lw[ch];
                        d_s += up * fres;
                        d_q += up * s_geo * (1.0 - f0[ch]);
                        acc.grads.f0[idx][ch] += d_c[ch] * lw[ch] * s_geo * (1.0 - q);
                        d_lw[ch] = d_c[ch] * s_geo * fres;
                    }
                    acc.grads.roughness[idx] += d_s * g.ds_dr;
                    acc.d_normal[idx] += g.ds_dn * d_s;
                    acc.d_dir[idx * frame.opts.ns + k] += g.ds_dwi * d_s + g.du_dwi * (d_q * dq_du);
                    acc.d_weighted[idx * frame.opts.ns + k] += d_lw;
                }
            }
        }

        // --- flipped-normal adjoint ---------------------------------------
        if !hit_up.is_empty() {
            acc.d_normal[idx] += hit_up[i].d_normal_flipped * rec.flip;
        }

        // --- alpha and geometry --------------------------------------------
        let d_alpha = alpha_adj[i];
        let kernel = eval_kernel(rec.u, rec.v);
        acc.grads.opacity[idx] += d_alpha * kernel;
        let dk = d_alpha * surfel.opacity * kernel;
        let g_u = dk * (-rec.u);
        let g_v = dk * (-rec.v);
        let g_t = (rec.weight / w_total) * d_depth * dirz;
        if g_u != 0.0 || g_v != 0.0 || g_t != 0.0 {
            let a = surfel.tangent_u * surfel.scale_u;
            let b = surfel.tangent_v * surfel.scale_v;
            let c = -ray.dir;
            // Solve M^T y = g where M = [a b c].
            let col_x = Vec3 { x: a.x, y: b.x, z: c.x };
            let col_y = Vec3 { x: a.y, y: b.y, z: c.y };
            let col_z = Vec3 { x: a.z, y: b.z, z: c.z };
            if let Some(adj) = solve3(
                col_x,
                col_y,
                col_z,
                Vec3 { x: g_u, y: g_v, z: g_t },
                f64::MIN_POSITIVE,
            ) {
                // dL/d rhs = y with rhs = origin - position.
                acc.grads.position[idx] -= adj;
                // dL/dM = -y x^T, columns a (times u), b (times v).
                acc.grads.tangent_u[idx] += adj * (-rec.u * surfel.scale_u);
                acc.grads.tangent_v[idx] += adj * (-rec.v * surfel.scale_v);
                acc.grads.scale[idx][0] += -rec.u * adj.dot(surfel.tangent_u);
                acc.grads.scale[idx][1] += -rec.v * adj.dot(surfel.tangent_v);
            }
        }
    }
}

/// Chain the per-surfel accumulators through the lighting cache and the
/// normal construction into tangent/environment/indirect gradients.
fn finalize_surfel_chains(frame: &ForwardFrame, acc: &mut BandAccum) {
    let ns = frame.opts.ns;
    let canonical = brdf::fibonacci_hemisphere(ns);
    for idx in 0..frame.surfels.len() {
        let surfel = &frame.surfels[idx];
        let (normal_raw, normal) = frame.normals[idx];
        let mut d_normal = acc.d_normal[idx];

        if let Some(caches) = &frame.caches {
            let cache = &caches[idx];
            for k in 0..ns {
                let d_lw = acc.d_weighted[idx * ns + k];
                let mut d_dir = acc.d_dir[idx * ns + k];
                if d_lw != Rgb::BLACK {
                    // weighted = L_k * cosw; cosw is constant under the
                    // rotation chain.
                    let d_light = d_lw * cache.cosw[k];
                    let vis = cache.vis[k];
                    for (row, col, w) in cache.env_taps[k] {
                        acc.grads.env[row * crate::lighting::ENV_COLS + col] +=
                            d_light * (vis * w);
                    }
                    d_dir += cache.env_ddir[k][0] * (vis * d_light.r)
                        + cache.env_ddir[k][1] * (vis * d_light.g)
                        + cache.env_ddir[k][2] * (vis * d_light.b);
                    for ch in 0..3 {
                        if cache.ind_gate[k][ch] && d_light[ch] != 0.0 {
                            for m in 0..INDIRECT_SH_COEFFS {
                                acc.grads.indirect_sh[idx * INDIRECT_SH_COEFFS + m][ch] +=
                                    d_light[ch] * cache.ind_basis[k][m];
                                d_dir += cache.ind_basis_grad[k][m]
                                    * (d_light[ch] * surfel.indirect_sh[m][ch]);
                            }
                        }
                    }
                }
                if d_dir != Vec3::ZERO {
                    let jac = brdf::rotated_dir_jacobian(normal, canonical[k]);
                    d_normal += Vec3 {
                        x: jac.cols[0].dot(d_dir),
                        y: jac.cols[1].dot(d_dir),
                        z: jac.cols[2].dot(d_dir),
                    };
                }
            }
        }

        if d_normal != Vec3::ZERO {
            // n = raw/|raw|: project out the radial component.
            let len = normal_raw.norm();
            let d_raw = (d_normal - normal * normal.dot(d_normal)) / len;
            acc.grads.tangent_u[idx] += surfel.tangent_v.cross(d_raw);
            acc.grads.tangent_v[idx] += d_raw.cross(surfel.tangent_u);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{rgb, vec3};
    use crate::optimize::params::{ParamGroup, SceneParams};
    use crate::rasterize::{render, RenderOptions};
    use rand::{rngs::StdRng, Rng as _, SeedableRng as _};

    fn test_scene() -> (Vec<Surfel>, Camera, EnvironmentMap) {
        let mut surfels = crate::surfel::sphere_surfels(24, 0.8, rgb(0.5, 0.35, 0.25), 0.4);
        for (i, s) in surfels.iter_mut().enumerate() {
            s.position.z += 3.0;
            s.indirect_sh[0] = Rgb::splat(0.15 / sh::SH_C0);
            s.diffuse_sh[2] = rgb(0.05, -0.04, 0.02);
            s.roughness = 0.25 + 0.02 * (i % 7) as f64;
        }
        let cam = Camera::look_at(vec3(0.2, -0.3, 0.0), vec3(0.0, 0.0, 3.0), Vec3::Y, 28.0, 32, 32);
        // Smooth, colorful environment: low-frequency so bilinear seams carry
        // negligible derivative jumps.
        let mut texels = Vec::new();
        for row in 0..crate::lighting::ENV_ROWS {
            for col in 0..crate::lighting::ENV_COLS {
                let theta = (row as f64 + 0.5) / 16.0 * std::f64::consts::PI;
                let phi = (col as f64 + 0.5) / 32.0 * std::f64::consts::TAU;
                texels.push(rgb(
                    0.4 + 0.25 * theta.cos(),
                    0.35 + 0.2 * (phi.sin() * theta.sin()),
                    0.3 + 0.15 * (phi.cos() * theta.sin()),
                ));
            }
        }
        (surfels, cam, EnvironmentMap::from_texels(texels))
    }

    #[test]
    fn forward_matches_render() {
        let (surfels, cam, env) = test_scene();
        let opts = DiffOptions::default();
        let frame = forward(&surfels, &cam, &env, None, &opts);
        let render_opts = RenderOptions {
            shade: crate::brdf::ShadeOptions {
                ns: opts.ns,
                mode: opts.mode,
                diffuse_only: opts.diffuse_only,
            },
        };
        let reference = render(&surfels, &cam, &env, None, &render_opts);
        assert_eq!(frame.buffers.color.data(), reference.color.data());
        assert_eq!(frame.buffers.depth.data(), reference.depth.data());
        assert_eq!(frame.buffers.normal.data(), reference.normal.data());
        assert_eq!(frame.buffers.opacity.data(), reference.opacity.data());
    }

    /// A fixed random linear functional over the buffers: enough to probe
    /// every backward path that flows through color/depth/opacity.
    fn linear_loss_weights(width: usize, height: usize) -> (Grid<Rgb>, Grid<f64>, Grid<f64>) {
        let mut rng = StdRng::seed_from_u64(99);
        let mut a = Grid::new(width, height, Rgb::BLACK);
        let mut b = Grid::new(width, height, 0.0);
        let mut c = Grid::new(width, height, 0.0);
        for y in 0..height {
            for x in 0..width {
                a.set(x, y, rgb(rng.gen(), rng.gen(), rng.gen()));
                b.set(x, y, 0.2 * (rng.gen::<f64>() - 0.5));
                c.set(x, y, rng.gen::<f64>() - 0.5);
            }
        }
        (a, b, c)
    }

    fn linear_loss(
        surfels: &[Surfel],
        cam: &Camera,
        env: &EnvironmentMap,
        opts: &DiffOptions,
        w: &(Grid<Rgb>, Grid<f64>, Grid<f64>),
    ) -> f64 {
        let frame = forward(surfels, cam, env, None, opts);
        let mut acc = 0.0;
        for y in 0..cam.height {
            for x in 0..cam.width {
                let cw = w.0.get(x, y);
                let col = frame.buffers.color.get(x, y);
                acc += cw.r * col.r + cw.g * col.g + cw.b * col.b;
                acc += w.1.get(x, y) * frame.buffers.depth.get(x, y);
                acc += w.2.get(x, y) * frame.buffers.opacity.get(x, y);
            }
        }
        acc
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (surfels, cam, env) = test_scene();
        let opts = DiffOptions {
            ns: 32,
            ..DiffOptions::default()
        };
        let weights = linear_loss_weights(cam.width, cam.height);

        let frame = forward(&surfels, &cam, &env, None, &opts);
        let mut upstream = UpstreamGrads::zeros(cam.width, cam.height);
        upstream.d_color = weights.0.clone();
        upstream.d_depth = weights.1.clone();
        upstream.d_opacity = weights.2.clone();
        let grads = backward(&frame, &upstream);

        let params = SceneParams::from_scene(&surfels, &env);
        let raw = grads.to_raw(&params);

        let eval = |p: &SceneParams| {
            let s = p.surfels();
            let e = p.environment();
            linear_loss(&s, &cam, &e, &opts, &weights)
        };

        let mut rng = StdRng::seed_from_u64(7);
        let eps = 1e-5;
        let groups = [
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
        for group in groups {
            let len = params.group_len(group);
            let mut worst: f64 = 0.0;
            for _ in 0..6 {
                let idx = rng.gen_range(0..len);
                let mut plus = params.clone();
                plus.add_coord(group, idx, eps);
                let mut minus = params.clone();
                minus.add_coord(group, idx, -eps);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = raw.coord(group, idx);
                let denom = fd.abs().max(an.abs()).max(1e-5);
                worst = worst.max((fd - an).abs() / denom);
            }
            assert!(
                worst < 2e-3,
                "group {:?}: worst relative error {worst}",
                group
            );
        }
    }

    #[test]
    fn diffuse_only_backward_matches_fd() {
        let (surfels, cam, env) = test_scene();
        let opts = DiffOptions {
            ns: 16,
            diffuse_only: true,
            ..DiffOptions::default()
        };
        let weights = linear_loss_weights(cam.width, cam.height);
        let frame = forward(&surfels, &cam, &env, None, &opts);
        let mut upstream = UpstreamGrads::zeros(cam.width, cam.height);
        upstream.d_color = weights.0.clone();
        upstream.d_depth = weights.1.clone();
        upstream.d_opacity = weights.2.clone();
        let grads = backward(&frame, &upstream);
        let params = SceneParams::from_scene(&surfels, &env);
        let raw = grads.to_raw(&params);
        let eval = |p: &SceneParams| {
            let s = p.surfels();
            let e = p.environment();
            linear_loss(&s, &cam, &e, &opts, &weights)
        };
        let mut rng = StdRng::seed_from_u64(17);
        let eps = 1e-5;
        for group in [ParamGroup::Position, ParamGroup::Scales, ParamGroup::DiffuseSh] {
            let len = params.group_len(group);
            for _ in 0..5 {
                let idx = rng.gen_range(0..len);
                let mut plus = params.clone();
                plus.add_coord(group, idx, eps);
                let mut minus = params.clone();
                minus.add_coord(group, idx, -eps);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = raw.coord(group, idx);
                let denom = fd.abs().max(an.abs()).max(1e-5);
                assert!(
                    ((fd - an).abs() / denom) < 2e-3,
                    "{group:?}[{idx}]: fd {fd} vs {an}"
                );
            }
        }
        // Specular-only groups must be silent in diffuse mode.
        assert!(grads.roughness.iter().all(|&g| g == 0.0));
        assert!(grads.env.iter().all(|&g| g == Rgb::BLACK));
    }

    #[test]
    fn backward_deterministic_across_thread_counts() {
        let (surfels, cam, env) = test_scene();
        let opts = DiffOptions {
            ns: 16,
            ..DiffOptions::default()
        };
        let weights = linear_loss_weights(cam.width, cam.height);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let frame = forward(&surfels, &cam, &env, None, &opts);
                let mut upstream = UpstreamGrads::zeros(cam.width, cam.height);
                upstream.d_color = weights.0.clone();
                upstream.d_depth = weights.1.clone();
                upstream.d_opacity = weights.2.clone();
                backward(&frame, &upstream)
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b, "gradients must be bit-identical across thread counts");
    }
}
