//! Rough timing probe for the desk-scale fit: renders a glossy sphere
//! ground truth, perturbs materials, and runs a short phased fit.

use glosskit::lighting::EnvironmentMap;
use glosskit::math::{rgb, vec3, Rgb, Vec3};
use glosskit::optimize::{self, psnr, TrainConfig};
use glosskit::rasterize::{self, Camera, RenderOptions};
use glosskit::raytrace;
use glosskit::scene::View;
use glosskit::surfel::sphere_surfels;
use std::time::Instant;

fn smooth_env(scale: f64) -> EnvironmentMap {
    let mut texels = Vec::new();
    for row in 0..16 {
        for col in 0..32 {
            let t = (row as f64 + 0.5) / 16.0 * std::f64::consts::PI;
            let p = (col as f64 + 0.5) / 32.0 * std::f64::consts::TAU;
            texels.push(
                rgb(
                    0.55 + 0.35 * t.cos(),
                    0.45 + 0.3 * (p.sin() * t.sin()),
                    0.5 + 0.25 * (p.cos() * t.sin()).powi(2),
                ) * scale,
            );
        }
    }
    EnvironmentMap::from_texels(texels)
}

fn ring_cameras(n: usize, radius: f64, size: usize, fx: f64) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let phi = i as f64 / n as f64 * std::f64::consts::TAU;
            let elev: f64 = if i % 2 == 0 { 0.35 } else { -0.35 };
            let eye = vec3(
                radius * phi.cos() * elev.cos(),
                radius * phi.sin() * elev.cos(),
                radius * elev.sin(),
            );
            Camera::look_at(eye, Vec3::ZERO, Vec3::Z, fx, size, size)
        })
        .collect()
}

fn main() {
    let size = 48;
    let n_surfels = 200;
    let mut gt = sphere_surfels(n_surfels, 1.0, rgb(0.55, 0.35, 0.25), 0.1);
    for s in &mut gt {
        s.specular_reflectance = Rgb::splat(0.04);
    }
    let env = smooth_env(1.0);
    let cams = ring_cameras(6, 3.2, size, size as f64 * 1.1);

    let ns = 64;
    let opts = RenderOptions {
        shade: rasterize::shade_options(ns, false, false),
    };
    let t0 = Instant::now();
    let vis = raytrace::precompute_visibility(&gt, ns, 0.01);
    println!("visibility precompute: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let views: Vec<View> = cams
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let buf = rasterize::render(&gt, cam, &env, Some(&vis), &opts);
            View {
                image: buf.color.clone(),
                mask: Some(buf.opacity.clone()),
                camera: cam.clone(),
                name: format!("r_{i}"),
            }
        })
        .collect();
    println!(
        "GT render {} views: {:.1} ms",
        views.len(),
        t0.elapsed().as_secs_f64() * 1e3
    );

    // Perturb materials.
    let mut init = gt.clone();
    for (i, s) in init.iter_mut().enumerate() {
        s.roughness = 0.22;
        s.specular_reflectance = Rgb::splat(0.07);
        let f = 1.0 + 0.15 * ((i % 5) as f64 - 2.0) / 2.0;
        for c in s.diffuse_sh.iter_mut() {
            *c = *c * f;
        }
    }
    let mut env_init = env.clone();
    for (i, t) in env_init.texels_mut().iter_mut().enumerate() {
        let f = 0.8 + 0.4 * ((i % 7) as f64 / 6.0);
        *t = (*t * f).map(|v| v.max(0.01));
    }

    // Short probe: 20 iters of each stage flavor to time per-iteration cost.
    let probe = TrainConfig {
        stage1_iters: 10,
        stage2_iters: 10,
        stage3_iters: 10,
        iters_scale: 1.0,
        ns,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let result = optimize::train(&init, &env_init, &views, &probe, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "30 probe iters: {:.2} s ({:.1} ms/iter avg)",
        dt,
        dt / 30.0 * 1e3
    );

    // Extrapolate the real fit: 350 + 900 + 750.
    println!(
        "projected full fit (350/900/750): ~{:.1} s (specular iters dominate)",
        dt / 30.0 * 2000.0
    );
    let _ = result;

    // And measure PSNR of the perturbed init for reference.
    let mut mean = 0.0;
    for v in &views {
        let buf = rasterize::render(&init, &v.camera, &env_init, Some(&vis), &opts);
        mean += psnr(&buf.color, &v.image);
    }
    println!("init PSNR: {:.2} dB", mean / views.len() as f64);
}
