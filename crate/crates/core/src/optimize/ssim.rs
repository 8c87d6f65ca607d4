//! SSIM over RGB images with an 11x11 Gaussian window (sigma 1.5) and the
//! standard constants for unit dynamic range. Only fully interior windows
//! contribute; the mean runs over windows and channels. The backward pass
//! scatters the analytic derivative with respect to the first image.

use crate::math::{Grid, Rgb};

pub const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WINDOW * WINDOW] {
    let mut w = [0.0; WINDOW * WINDOW];
    let half = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..WINDOW {
        for x in 0..WINDOW {
            let dx = x as f64 - half;
            let dy = y as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp();
            w[y * WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM of `x` against `y`. Returns 1.0 (no dissimilarity signal) when
/// the image is smaller than the window.
pub fn ssim(x: &Grid<Rgb>, y: &Grid<Rgb>) -> f64 {
    ssim_impl(x, y, None)
}

/// Mean SSIM plus d(mean SSIM)/dx per pixel and channel.
pub fn ssim_with_grad(x: &Grid<Rgb>, y: &Grid<Rgb>) -> (f64, Grid<Rgb>) {
    let mut grad = Grid::new(x.width(), x.height(), Rgb::BLACK);
    let value = ssim_impl(x, y, Some(&mut grad));
    (value, grad)
}

fn ssim_impl(x: &Grid<Rgb>, y: &Grid<Rgb>, mut grad: Option<&mut Grid<Rgb>>) -> f64 {
    assert!(x.same_size(y), "ssim image dimensions differ");
    let (w, h) = (x.width(), x.height());
    if w < WINDOW || h < WINDOW {
        return 1.0;
    }
    let kernel = gaussian_window();
    let half = WINDOW / 2;
    let nx = w - WINDOW + 1;
    let ny = h - WINDOW + 1;
    let norm = 1.0 / (nx as f64 * ny as f64 * 3.0);
    let mut total = 0.0;
    for cy in half..h - half {
        for cx in half..w - half {
            for ch in 0..3 {
                // Window statistics.
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut qx = 0.0; // E[x^2]
                let mut qy = 0.0;
                let mut sxy = 0.0; // E[x y]
                for ky in 0..WINDOW {
                    for kx in 0..WINDOW {
                        let wgt = kernel[ky * WINDOW + kx];
                        let xv = x.get(cx + kx - half, cy + ky - half)[ch];
                        let yv = y.get(cx + kx - half, cy + ky - half)[ch];
                        mx += wgt * xv;
                        my += wgt * yv;
                        qx += wgt * xv * xv;
                        qy += wgt * yv * yv;
                        sxy += wgt * xv * yv;
                    }
                }
                let vx = qx - mx * mx;
                let vy = qy - my * my;
                let cxy = sxy - mx * my;
                let a1 = 2.0 * mx * my + C1;
                let a2 = 2.0 * cxy + C2;
                let b1 = mx * mx + my * my + C1;
                let b2 = vx + vy + C2;
                let s = (a1 * a2) / (b1 * b2);
                total += s;

                if let Some(grad) = grad.as_deref_mut() {
                    // Partials with respect to the window statistics
                    // (mx, qx, sxy); vx and cxy are functions of them.
                    let inv_b = 1.0 / (b1 * b2);
                    let ds_dm = 2.0 * my * (a2 - a1) * inv_b - 2.0 * mx * s / b1
                        + 2.0 * mx * s / b2;
                    let ds_dq = -s / b2;
                    let ds_ds = 2.0 * a1 * inv_b;
                    for ky in 0..WINDOW {
                        for kx in 0..WINDOW {
                            let wgt = kernel[ky * WINDOW + kx];
                            let px = cx + kx - half;
                            let py = cy + ky - half;
                            let xv = x.get(px, py)[ch];
                            let yv = y.get(px, py)[ch];
                            grad.get_mut(px, py)[ch] +=
                                norm * wgt * (ds_dm + 2.0 * xv * ds_dq + yv * ds_ds);
                        }
                    }
                }
            }
        }
    }
    total * norm
}
