//! Image and table I/O: 8-bit PNG for color, PFM for float buffers, CSV for
//! loss histories, and a small text format for hand-authored environment
//! maps.

use crate::lighting::{EnvironmentMap, ENV_COLS, ENV_ROWS};
use crate::math::{rgb, Grid, Rgb, Vec3};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a color buffer as 8-bit PNG, tonemapped by clamping to [0,1].
pub fn write_png(path: &Path, color: &Grid<Rgb>) -> Result<(), IoError> {
    let mut img = image::RgbImage::new(color.width() as u32, color.height() as u32);
    for y in 0..color.height() {
        for x in 0..color.width() {
            let c = color.get(x, y);
            img.put_pixel(x as u32, y as u32, image::Rgb([to_u8(c.r), to_u8(c.g), to_u8(c.b)]));
        }
    }
    img.save(path)
        .map_err(|e| format_err(path, format!("png encode failed: {e}")))
}

/// Write color + alpha as RGBA PNG (the alpha channel doubles as the mask
/// convention for training data).
pub fn write_png_with_alpha(path: &Path, color: &Grid<Rgb>, alpha: &Grid<f64>) -> Result<(), IoError> {
    assert!(color.same_size(alpha), "alpha buffer size mismatch");
    let mut img = image::RgbaImage::new(color.width() as u32, color.height() as u32);
    for y in 0..color.height() {
        for x in 0..color.width() {
            let c = color.get(x, y);
            let a = *alpha.get(x, y);
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgba([to_u8(c.r), to_u8(c.g), to_u8(c.b), to_u8(a)]),
            );
        }
    }
    img.save(path)
        .map_err(|e| format_err(path, format!("png encode failed: {e}")))
}

/// Read a PNG into linear [0,1] RGB plus the alpha channel when one exists.
pub fn read_png(path: &Path) -> Result<(Grid<Rgb>, Option<Grid<f64>>), IoError> {
    let img = image::open(path).map_err(|e| format_err(path, format!("png decode failed: {e}")))?;
    let has_alpha = img.color().has_alpha();
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut color = Grid::new(w, h, Rgb::BLACK);
    let mut alpha = Grid::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = rgba.get_pixel(x as u32, y as u32);
            color.set(
                x,
                y,
                rgb(
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ),
            );
            alpha.set(x, y, p[3] as f64 / 255.0);
        }
    }
    Ok((color, has_alpha.then_some(alpha)))
}

/// Grayscale PFM ("Pf"), little-endian, bottom-up scanline order.
pub fn write_pfm_gray(path: &Path, grid: &Grid<f64>) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(grid.width() * grid.height() * 4 + 64);
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", grid.width(), grid.height()).as_bytes());
    for y in (0..grid.height()).rev() {
        for x in 0..grid.width() {
            out.extend_from_slice(&(*grid.get(x, y) as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(file_err(path))
}

/// Color PFM ("PF"), little-endian, bottom-up scanline order.
pub fn write_pfm_rgb(path: &Path, grid: &Grid<Rgb>) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(grid.width() * grid.height() * 12 + 64);
    out.extend_from_slice(format!("PF\n{} {}\n-1.0\n", grid.width(), grid.height()).as_bytes());
    for y in (0..grid.height()).rev() {
        for x in 0..grid.width() {
            let c = grid.get(x, y);
            out.extend_from_slice(&(c.r as f32).to_le_bytes());
            out.extend_from_slice(&(c.g as f32).to_le_bytes());
            out.extend_from_slice(&(c.b as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(file_err(path))
}

/// Vector buffers (normals) are stored as color PFM.
pub fn write_pfm_vec3(path: &Path, grid: &Grid<Vec3>) -> Result<(), IoError> {
    let mut as_rgb = Grid::new(grid.width(), grid.height(), Rgb::BLACK);
    for (dst, src) in as_rgb.data_mut().iter_mut().zip(grid.data()) {
        *dst = rgb(src.x, src.y, src.z);
    }
    write_pfm_rgb(path, &as_rgb)
}

pub enum Pfm {
    Gray(Grid<f64>),
    Rgb(Grid<Rgb>),
}

/// Read either PFM variant; handles both endiannesses and restores top-down
/// row order.
pub fn read_pfm(path: &Path) -> Result<Pfm, IoError> {
    let file = std::fs::File::open(path).map_err(file_err(path))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(file_err(path))?;
    let color = match header.trim() {
        "PF" => true,
        "Pf" => false,
        other => return Err(format_err(path, format!("not a PFM file (header {other:?})"))),
    };
    let mut dims = String::new();
    reader.read_line(&mut dims).map_err(file_err(path))?;
    let mut parts = dims.split_whitespace();
    let (w, h): (usize, usize) = match (parts.next(), parts.next()) {
        (Some(w), Some(h)) => (
            w.parse().map_err(|_| format_err(path, "bad width"))?,
            h.parse().map_err(|_| format_err(path, "bad height"))?,
        ),
        _ => return Err(format_err(path, "missing dimensions")),
    };
    let mut scale_line = String::new();
    reader.read_line(&mut scale_line).map_err(file_err(path))?;
    let scale: f64 = scale_line
        .trim()
        .parse()
        .map_err(|_| format_err(path, "bad scale"))?;
    let little_endian = scale < 0.0;
    let channels = if color { 3 } else { 1 };
    let mut bytes = vec![0u8; w * h * channels * 4];
    reader.read_exact(&mut bytes).map_err(file_err(path))?;
    let mut values = Vec::with_capacity(w * h * channels);
    for chunk in bytes.chunks_exact(4) {
        let arr = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(arr)
        } else {
            f32::from_be_bytes(arr)
        };
        values.push(v as f64 * scale.abs());
    }
    if color {
        let mut grid = Grid::new(w, h, Rgb::BLACK);
        for y in 0..h {
            let src_row = h - 1 - y;
            for x in 0..w {
                let i = (src_row * w + x) * 3;
                grid.set(x, y, rgb(values[i], values[i + 1], values[i + 2]));
            }
        }
        Ok(Pfm::Rgb(grid))
    } else {
        let mut grid = Grid::new(w, h, 0.0);
        for y in 0..h {
            let src_row = h - 1 - y;
            for x in 0..w {
                grid.set(x, y, values[src_row * w + x]);
            }
        }
        Ok(Pfm::Gray(grid))
    }
}

/// Environment map to 32x16 color PFM (width = azimuth columns).
pub fn write_env_pfm(path: &Path, env: &EnvironmentMap) -> Result<(), IoError> {
    let mut grid = Grid::new(ENV_COLS, ENV_ROWS, Rgb::BLACK);
    for row in 0..ENV_ROWS {
        for col in 0..ENV_COLS {
            grid.set(col, row, env.texel(row, col));
        }
    }
    write_pfm_rgb(path, &grid)
}

pub fn read_env_pfm(path: &Path) -> Result<EnvironmentMap, IoError> {
    match read_pfm(path)? {
        Pfm::Rgb(grid) => {
            if grid.width() != ENV_COLS || grid.height() != ENV_ROWS {
                return Err(format_err(
                    path,
                    format!(
                        "environment map must be {ENV_COLS}x{ENV_ROWS}, got {}x{}",
                        grid.width(),
                        grid.height()
                    ),
                ));
            }
            let mut texels = Vec::with_capacity(ENV_ROWS * ENV_COLS);
            for row in 0..ENV_ROWS {
                for col in 0..ENV_COLS {
                    let t = *grid.get(col, row);
                    texels.push(t.clamp_non_negative());
                }
            }
            Ok(EnvironmentMap::from_texels(texels))
        }
        Pfm::Gray(_) => Err(format_err(path, "environment map PFM must be color (PF)")),
    }
}

/// Plain text environment map: a header line `GLOSSENV 16 32` followed by
/// 512 `r g b` lines in row-major order (row 0 at the +z pole).
pub fn write_env_text(path: &Path, env: &EnvironmentMap) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(&format!("GLOSSENV {ENV_ROWS} {ENV_COLS}\n"));
    for t in env.texels() {
        out.push_str(&format!("{} {} {}\n", t.r, t.g, t.b));
    }
    std::fs::write(path, out).map_err(file_err(path))
}

pub fn read_env_text(path: &Path) -> Result<EnvironmentMap, IoError> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let mut parts = header.split_whitespace();
    if parts.next() != Some("GLOSSENV") {
        return Err(format_err(path, "missing GLOSSENV header"));
    }
    let rows: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(path, "bad row count"))?;
    let cols: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(path, "bad column count"))?;
    if rows != ENV_ROWS || cols != ENV_COLS {
        return Err(format_err(
            path,
            format!("environment map must be {ENV_ROWS}x{ENV_COLS}, got {rows}x{cols}"),
        ));
    }
    let mut texels = Vec::with_capacity(ENV_ROWS * ENV_COLS);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format_err(path, format!("bad texel on line {}", i + 2)))?;
        if vals.len() != 3 {
            return Err(format_err(path, format!("expected 3 values on line {}", i + 2)));
        }
        if vals.iter().any(|v| *v < 0.0) {
            return Err(format_err(path, format!("negative radiance on line {}", i + 2)));
        }
        texels.push(rgb(vals[0], vals[1], vals[2]));
    }
    if texels.len() != ENV_ROWS * ENV_COLS {
        return Err(format_err(
            path,
            format!("expected {} texels, got {}", ENV_ROWS * ENV_COLS, texels.len()),
        ));
    }
    Ok(EnvironmentMap::from_texels(texels))
}

/// Load an environment map by extension: `.pfm` binary or anything else as
/// the text format.
pub fn read_env_any(path: &Path) -> Result<EnvironmentMap, IoError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        read_env_pfm(path)
    } else {
        read_env_text(path)
    }
}

/// Loss-history CSV: one row per iteration.
pub fn write_loss_csv(
    path: &Path,
    rows: &[crate::optimize::LossReport],
) -> Result<(), IoError> {
    let file = std::fs::File::create(path).map_err(file_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "iteration,total,photometric,normal,light,alpha").map_err(file_err(path))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.iteration, r.total, r.photometric, r.normal, r.light, r.alpha
        )
        .map_err(file_err(path))?;
    }
    Ok(())
}
