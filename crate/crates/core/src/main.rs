//! Command-line entry points: render, train, relight, bench, gradcheck.

use clap::{Args, Parser, Subcommand};
use glosskit::io;
use glosskit::lighting::EnvironmentMap;
use glosskit::math::{rgb, vec3, Grid, Rgb, Vec3};
use glosskit::optimize::{
    self, grad_check, psnr, EffectiveWeights, GradCheckOptions, ParamGroup, TrainConfig,
};
use glosskit::rasterize::{self, Camera, RenderOptions};
use glosskit::rasterize::Ray;
use glosskit::raytrace::{self, VisibilityTable};
use glosskit::scene::{self, Scene};
use glosskit::surfel::{box_surfels, sphere_surfels};
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "glosskit",
    version,
    about = "Inverse renderer for glossy Gaussian surfels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SharedArgs {
    /// Worker threads. Output is bit-identical for any thread count.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Scale factor applied to all stage lengths.
    #[arg(long)]
    iters_scale: Option<f64>,
    /// Response threshold for visibility proxies.
    #[arg(long)]
    alpha_min: Option<f64>,
    /// Incident hemisphere samples per shaded hit.
    #[arg(long)]
    ns: Option<usize>,
    /// Ablation: isotropic SG NDF instead of the anisotropic warp.
    #[arg(long, default_value_t = false)]
    iso_sg: bool,
    /// Ablation: drop the normal-consistency loss.
    #[arg(long, default_value_t = false)]
    no_normal_loss: bool,
    /// Ablation: optimize everything jointly instead of in phases.
    #[arg(long, default_value_t = false)]
    no_phases: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene camera to PNG (plus optional float buffers).
    Render {
        #[command(flatten)]
        shared: SharedArgs,
        #[arg(long)]
        scene: PathBuf,
        /// Index into the scene's camera list.
        #[arg(long, default_value_t = 0)]
        camera_id: usize,
        /// Override pose: camera position "x,y,z" (needs --look-at).
        #[arg(long)]
        look_from: Option<String>,
        #[arg(long)]
        look_at: Option<String>,
        /// Vertical field of view in degrees for the pose override.
        #[arg(long, default_value_t = 40.0)]
        fov_deg: f64,
        /// Image size "WxH" for the pose override.
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        out_color: PathBuf,
        #[arg(long)]
        out_depth: Option<PathBuf>,
        #[arg(long)]
        out_normal: Option<PathBuf>,
        #[arg(long)]
        out_opacity: Option<PathBuf>,
        /// Export the visibility table as PFM.
        #[arg(long)]
        out_visibility: Option<PathBuf>,
        /// Skip the specular term entirely.
        #[arg(long, default_value_t = false)]
        diffuse_only: bool,
        /// Shade with an all-visible table instead of ray-traced visibility.
        #[arg(long, default_value_t = false)]
        no_visibility: bool,
    },
    /// Fit a scene to a posed image dataset.
    Train {
        #[command(flatten)]
        shared: SharedArgs,
        /// transforms.json-style dataset manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// JSON training configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Initial scene file (its cameras are ignored).
        #[arg(long)]
        init_scene: Option<PathBuf>,
        /// Primitive used when no initial scene is given.
        #[arg(long, default_value = "sphere")]
        init_shape: String,
        /// Surfel count for sphere init / per-face count for box init.
        #[arg(long, default_value_t = 200)]
        init_count: usize,
        /// Radius (sphere) or half-extent (box) of the init primitive.
        #[arg(long, default_value_t = 1.0)]
        init_radius: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-render a fitted scene under a replacement environment map.
    Relight {
        #[command(flatten)]
        shared: SharedArgs,
        #[arg(long)]
        scene: PathBuf,
        /// Replacement 16x32 environment map (.pfm or text).
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera_id: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        no_visibility: bool,
        #[arg(long, default_value_t = false)]
        diffuse_only: bool,
    },
    /// Count BVH leaf candidates with hull-exact vs AABB-only tests.
    Bench {
        #[command(flatten)]
        shared: SharedArgs,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        rays: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        shared: SharedArgs,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera_id: usize,
        /// Coordinates probed per parameter group.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Check the frozen-geometry (appearance stage) contract instead of
        /// the fully active one.
        #[arg(long, default_value_t = false)]
        frozen_geometry: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("GLOSSKIT_LOG")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn shared_of(command: &Command) -> &SharedArgs {
    match command {
        Command::Render { shared, .. }
        | Command::Train { shared, .. }
        | Command::Relight { shared, .. }
        | Command::Bench { shared, .. }
        | Command::Gradcheck { shared, .. } => shared,
    }
}

fn run(cli: Cli) -> Result<(), String> {
    let shared = shared_of(&cli.command).clone();
    rayon::ThreadPoolBuilder::new()
        .num_threads(shared.threads.max(1))
        .build_global()
        .map_err(|e| format!("thread pool: {e}"))?;

    match cli.command {
        Command::Render {
            scene,
            camera_id,
            look_from,
            look_at,
            fov_deg,
            size,
            out_color,
            out_depth,
            out_normal,
            out_opacity,
            out_visibility,
            diffuse_only,
            no_visibility,
            ..
        } => cmd_render(RenderJob {
            shared,
            scene,
            camera_id,
            look_from,
            look_at,
            fov_deg,
            size,
            out_color,
            out_depth,
            out_normal,
            out_opacity,
            out_visibility,
            diffuse_only,
            no_visibility,
            env_override: None,
        }),
        Command::Train {
            manifest,
            config,
            init_scene,
            init_shape,
            init_count,
            init_radius,
            out_dir,
            ..
        } => cmd_train(
            shared, manifest, config, init_scene, init_shape, init_count, init_radius, out_dir,
        ),
        Command::Relight {
            scene,
            env,
            camera_id,
            out,
            no_visibility,
            diffuse_only,
            ..
        } => {
            let map = io::read_env_any(&env).map_err(|e| e.to_string())?;
            cmd_render(RenderJob {
                shared,
                scene,
                camera_id,
                look_from: None,
                look_at: None,
                fov_deg: 40.0,
                size: None,
                out_color: out,
                out_depth: None,
                out_normal: None,
                out_opacity: None,
                out_visibility: None,
                diffuse_only,
                no_visibility,
                env_override: Some(map),
            })
        }
        Command::Bench { scene, rays, out, .. } => cmd_bench(shared, scene, rays, out),
        Command::Gradcheck {
            scene,
            camera_id,
            samples,
            frozen_geometry,
            ..
        } => cmd_gradcheck(shared, scene, camera_id, samples, frozen_geometry),
    }
}

struct RenderJob {
    shared: SharedArgs,
    scene: PathBuf,
    camera_id: usize,
    look_from: Option<String>,
    look_at: Option<String>,
    fov_deg: f64,
    size: Option<String>,
    out_color: PathBuf,
    out_depth: Option<PathBuf>,
    out_normal: Option<PathBuf>,
    out_opacity: Option<PathBuf>,
    out_visibility: Option<PathBuf>,
    diffuse_only: bool,
    no_visibility: bool,
    env_override: Option<EnvironmentMap>,
}

fn parse_vec3(text: &str) -> Result<Vec3, String> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected \"x,y,z\", got {text:?}"))?;
    if parts.len() != 3 {
        return Err(format!("expected 3 components, got {}", parts.len()));
    }
    Ok(vec3(parts[0], parts[1], parts[2]))
}

fn parse_size(text: &str) -> Result<(usize, usize), String> {
    let (w, h) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected \"WxH\", got {text:?}"))?;
    Ok((
        w.parse().map_err(|_| format!("bad width {w:?}"))?,
        h.parse().map_err(|_| format!("bad height {h:?}"))?,
    ))
}

fn pick_camera(job: &RenderJob, scene: &Scene) -> Result<Camera, String> {
    if let (Some(from), Some(at)) = (&job.look_from, &job.look_at) {
        let eye = parse_vec3(from)?;
        let target = parse_vec3(at)?;
        let (w, h) = match &job.size {
            Some(s) => parse_size(s)?,
            None => (256, 256),
        };
        let fx = 0.5 * w as f64 / (0.5 * job.fov_deg.to_radians()).tan();
        return Ok(Camera::look_at(eye, target, Vec3::Y, fx, w, h));
    }
    scene
        .cameras
        .get(job.camera_id)
        .cloned()
        .ok_or_else(|| {
            format!(
                "invalid camera id {} (scene has {} cameras)",
                job.camera_id,
                scene.cameras.len()
            )
        })
}

fn cmd_render(job: RenderJob) -> Result<(), String> {
    let mut scene = scene::read_scene(&job.scene).map_err(|e| e.to_string())?;
    if let Some(env) = &job.env_override {
        scene.environment = env.clone();
    }
    let camera = pick_camera(&job, &scene)?;
    let ns = job.shared.ns.unwrap_or(64);
    let alpha_min = job.shared.alpha_min.unwrap_or(0.01);

    let visibility: Option<VisibilityTable> = if job.no_visibility || job.diffuse_only {
        None
    } else {
        Some(raytrace::precompute_visibility(&scene.surfels, ns, alpha_min))
    };
    let opts = RenderOptions {
        shade: rasterize::shade_options(ns, job.shared.iso_sg, job.diffuse_only),
    };
    let start = Instant::now();
    let buffers = rasterize::render(
        &scene.surfels,
        &camera,
        &scene.environment,
        visibility.as_ref(),
        &opts,
    );
    log::info!(
        "rendered {}x{} in {:.1} ms",
        camera.width,
        camera.height,
        start.elapsed().as_secs_f64() * 1e3
    );

    io::write_png(&job.out_color, &buffers.color).map_err(|e| e.to_string())?;
    if let Some(path) = &job.out_depth {
        io::write_pfm_gray(path, &buffers.depth).map_err(|e| e.to_string())?;
    }
    if let Some(path) = &job.out_normal {
        io::write_pfm_vec3(path, &buffers.normal).map_err(|e| e.to_string())?;
    }
    if let Some(path) = &job.out_opacity {
        io::write_pfm_gray(path, &buffers.opacity).map_err(|e| e.to_string())?;
    }
    if let Some(path) = &job.out_visibility {
        let table = visibility.unwrap_or_else(|| {
            raytrace::precompute_visibility(&scene.surfels, ns, alpha_min)
        });
        io::write_pfm_gray(path, &table.to_grid()).map_err(|e| e.to_string())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    shared: SharedArgs,
    manifest: PathBuf,
    config_path: Option<PathBuf>,
    init_scene: Option<PathBuf>,
    init_shape: String,
    init_count: usize,
    init_radius: f64,
    out_dir: PathBuf,
) -> Result<(), String> {
    let mut config: TrainConfig = match &config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = shared.seed {
        config.seed = seed;
    }
    if let Some(s) = shared.iters_scale {
        config.iters_scale = s;
    }
    if let Some(a) = shared.alpha_min {
        config.alpha_min = a;
    }
    if let Some(ns) = shared.ns {
        config.ns = ns;
    }
    config.iso_sg |= shared.iso_sg;
    config.no_normal_loss |= shared.no_normal_loss;
    config.no_phases |= shared.no_phases;

    let views = scene::load_dataset(&manifest).map_err(|e| e.to_string())?;

    let (surfels, environment) = match &init_scene {
        Some(path) => {
            let s = scene::read_scene(path).map_err(|e| e.to_string())?;
            (s.surfels, s.environment)
        }
        None => {
            let surfels = match init_shape.as_str() {
                "sphere" => sphere_surfels(init_count, init_radius, Rgb::splat(0.5), 0.5),
                "box" => {
                    let per_face = (init_count as f64 / 6.0).sqrt().ceil().max(1.0) as usize;
                    box_surfels(per_face, init_radius, Rgb::splat(0.5), 0.5)
                }
                other => return Err(format!("unknown init shape {other:?} (sphere|box)")),
            };
            let surfels = surfels
                .into_iter()
                .map(|mut s| {
                    s.opacity = 0.5;
                    s
                })
                .collect();
            (surfels, EnvironmentMap::constant(Rgb::splat(0.5)))
        }
    };

    std::fs::create_dir_all(&out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    let ckpt_dir = out_dir.clone();
    let mut checkpoint = |iter: usize, surfels: &[glosskit::surfel::Surfel], env: &EnvironmentMap| {
        let path = ckpt_dir.join(format!("checkpoint_{iter:06}.json"));
        let snapshot = Scene::new(Vec::new(), surfels.to_vec(), env.clone());
        if let Err(e) = scene::write_scene(&path, &snapshot) {
            log::warn!("checkpoint write failed: {e}");
        }
    };

    let start = Instant::now();
    let result = optimize::train(&surfels, &environment, &views, &config, Some(&mut checkpoint))
        .map_err(|e| e.to_string())?;
    log::info!(
        "trained {} iterations in {:.1} s",
        result.history.len(),
        start.elapsed().as_secs_f64()
    );

    io::write_loss_csv(&out_dir.join("losses.csv"), &result.history).map_err(|e| e.to_string())?;
    let cameras = views.iter().map(|v| v.camera.clone()).collect();
    let fitted = Scene::new(cameras, result.surfels, result.environment);
    scene::write_scene(&out_dir.join("scene_final.json"), &fitted).map_err(|e| e.to_string())?;

    // Final train-view PSNR, for quick inspection.
    let opts = RenderOptions {
        shade: rasterize::shade_options(config.ns, config.iso_sg, false),
    };
    let vis = raytrace::precompute_visibility(&fitted.surfels, config.ns, config.alpha_min);
    let mut mean_psnr = 0.0;
    for view in &views {
        let buffers = rasterize::render(
            &fitted.surfels,
            &view.camera,
            &fitted.environment,
            Some(&vis),
            &opts,
        );
        mean_psnr += psnr(&buffers.color, &view.image);
    }
    mean_psnr /= views.len() as f64;
    println!("final mean train-view PSNR: {mean_psnr:.2} dB");
    Ok(())
}

fn cmd_bench(
    shared: SharedArgs,
    scene_path: PathBuf,
    n_rays: usize,
    out: Option<PathBuf>,
) -> Result<(), String> {
    let scene = scene::read_scene(&scene_path).map_err(|e| e.to_string())?;
    let alpha_min = shared.alpha_min.unwrap_or(0.01);
    let seed = shared.seed.unwrap_or(0);

    // Deterministic ray set: origins on a sphere around the scene, aimed at
    // jittered targets near the centroid.
    let mut centroid = Vec3::ZERO;
    for s in &scene.surfels {
        centroid += s.position;
    }
    if !scene.surfels.is_empty() {
        centroid = centroid / scene.surfels.len() as f64;
    }
    let radius = scene
        .surfels
        .iter()
        .map(|s| (s.position - centroid).norm() + 3.0 * s.scale_u.max(s.scale_v))
        .fold(1.0f64, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rays: Vec<Ray> = (0..n_rays)
        .map(|_| {
            let dir = vec3(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            )
            .normalized();
            let origin = centroid + dir * (radius * 1.5);
            let jitter = vec3(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ) * (radius * 0.6);
            Ray {
                origin,
                dir: (centroid + jitter - origin).normalized(),
            }
        })
        .collect();

    let start = Instant::now();
    let bench = raytrace::bench_proxy(&scene.surfels, &rays, alpha_min);
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

    let csv = format!(
        "candidate_hits_proxy,candidate_hits_aabb,ratio,rays,elapsed_ms\n{},{},{},{},{:.3}\n",
        bench.candidate_hits_proxy, bench.candidate_hits_aabb, bench.ratio, n_rays, elapsed_ms
    );
    match out {
        Some(path) => std::fs::write(&path, &csv).map_err(|e| format!("{}: {e}", path.display()))?,
        None => print!("{csv}"),
    }
    println!(
        "proxy candidates {} / aabb candidates {} = ratio {:.4}",
        bench.candidate_hits_proxy, bench.candidate_hits_aabb, bench.ratio
    );
    Ok(())
}

fn cmd_gradcheck(
    shared: SharedArgs,
    scene_path: PathBuf,
    camera_id: usize,
    samples: usize,
    frozen_geometry: bool,
) -> Result<(), String> {
    let scene = scene::read_scene(&scene_path).map_err(|e| e.to_string())?;
    let camera = scene
        .cameras
        .get(camera_id)
        .cloned()
        .ok_or_else(|| format!("invalid camera id {camera_id}"))?;
    let ns = shared.ns.unwrap_or(16);

    // Self-contained target: a deterministically perturbed render keeps all
    // loss terms active without external data.
    let opts = RenderOptions {
        shade: rasterize::shade_options(ns, shared.iso_sg, false),
    };
    let buffers = rasterize::render(&scene.surfels, &camera, &scene.environment, None, &opts);
    let mut target = buffers.color.clone();
    for (i, px) in target.data_mut().iter_mut().enumerate() {
        px.r = (px.r * 0.9 + 0.03 + 0.001 * (i % 11) as f64).clamp(0.0, 1.0);
        px.g = (px.g * 1.1 + 0.02).clamp(0.0, 1.0);
        px.b = (px.b * 0.95 + 0.04).clamp(0.0, 1.0);
    }
    let mut mask = buffers.opacity.clone();
    for m in mask.data_mut() {
        *m = (*m * 0.8 + 0.1).clamp(0.0, 1.0);
    }

    let gc_opts = GradCheckOptions {
        samples_per_group: samples,
        ns,
        iso_sg: shared.iso_sg,
        seed: shared.seed.unwrap_or(0),
        frozen: if frozen_geometry {
            vec![
                ParamGroup::Position,
                ParamGroup::Tangents,
                ParamGroup::Scales,
                ParamGroup::Opacity,
            ]
        } else {
            Vec::new()
        },
        weights: EffectiveWeights {
            dssim: 0.2,
            normal: if shared.no_normal_loss { 0.0 } else { 0.05 },
            light: 0.01,
            alpha: 0.1,
        },
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        &scene.surfels,
        &scene.environment,
        &camera,
        &target,
        Some(&mask),
        None,
        &gc_opts,
    )
    .map_err(|e| e.to_string())?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.passed() {
        println!("gradcheck PASS (threshold {:.0e})", report.threshold);
        Ok(())
    } else {
        Err(format!(
            "gradcheck FAIL (threshold {:.0e})",
            report.threshold
        ))
    }
}

// Silences the unused-import warning for rgb, used in tests and init paths.
#[allow(dead_code)]
fn _unused(_: Rgb, _: Grid<f64>) {
    let _ = rgb(0.0, 0.0, 0.0);
}
