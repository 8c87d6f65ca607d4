//! Scene files, dataset manifests, and their validation.
//!
//! Scenes are versioned JSON with the environment map embedded inline so a
//! checkpoint is a single self-contained file. Datasets follow the
//! transforms.json convention of the synthetic NVS benchmarks: a shared
//! field of view plus a camera-to-world matrix per frame.

use crate::lighting::EnvironmentMap;
use crate::math::{Grid, Mat3, Rgb, Vec3};
use crate::rasterize::Camera;
use crate::surfel::Surfel;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scene file (schema version {SCENE_VERSION}): {0}")]
    Parse(String),
    #[error("unsupported scene version {0}; this build reads version {SCENE_VERSION}")]
    Version(u32),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("dataset manifest: {0}")]
    Manifest(String),
    #[error("referenced file missing: {0}")]
    MissingFile(PathBuf),
}

/// A renderable scene: cameras, surfels, and the environment map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub version: u32,
    pub cameras: Vec<Camera>,
    pub surfels: Vec<Surfel>,
    pub environment: EnvironmentMap,
}

impl Scene {
    pub fn new(cameras: Vec<Camera>, surfels: Vec<Surfel>, environment: EnvironmentMap) -> Scene {
        Scene {
            version: SCENE_VERSION,
            cameras,
            surfels,
            environment,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.version != SCENE_VERSION {
            return Err(SceneError::Version(self.version));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate()
                .map_err(|e| SceneError::Invalid(format!("camera {i}: {e}")))?;
        }
        for (i, s) in self.surfels.iter().enumerate() {
            s.validate()
                .map_err(|e| SceneError::Invalid(format!("surfel {i}: {e}")))?;
        }
        Ok(())
    }
}

pub fn read_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let scene: Scene = serde_json::from_str(&text).map_err(|e| SceneError::Parse(e.to_string()))?;
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<(), SceneError> {
    let text = serde_json::to_string_pretty(scene).expect("scene serialization cannot fail");
    std::fs::write(path, text).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One frame of a posed dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub file_path: String,
    /// Camera-to-world, OpenGL-style axes (x right, y up, z backward).
    pub transform_matrix: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub camera_angle_x: f64,
    pub frames: Vec<ManifestFrame>,
}

/// A loaded training view: image, optional mask, and the derived camera.
#[derive(Debug, Clone)]
pub struct View {
    pub image: Grid<Rgb>,
    pub mask: Option<Grid<f64>>,
    pub camera: Camera,
    pub name: String,
}

/// Convert a camera-to-world matrix in the OpenGL convention into this
/// renderer's world-to-camera (x right, y down, z forward).
pub fn camera_from_transform(
    transform: &[[f64; 4]; 4],
    camera_angle_x: f64,
    width: usize,
    height: usize,
) -> Result<Camera, SceneError> {
    let rot_c2w_gl = Mat3::from_rows(
        Vec3 {
            x: transform[0][0],
            y: transform[0][1],
            z: transform[0][2],
        },
        Vec3 {
            x: transform[1][0],
            y: transform[1][1],
            z: transform[1][2],
        },
        Vec3 {
            x: transform[2][0],
            y: transform[2][1],
            z: transform[2][2],
        },
    );
    let eye = Vec3 {
        x: transform[0][3],
        y: transform[1][3],
        z: transform[2][3],
    };
    if rot_c2w_gl.orthonormality_error() > 1e-4 {
        return Err(SceneError::Manifest(format!(
            "transform is not rigid (orthnormality error {})",
            rot_c2w_gl.orthonormality_error()
        )));
    }
    // Flip y and z columns: OpenGL camera looks along -z with +y up, ours
    // looks along +z with +y down.
    let rot_c2w = Mat3::from_cols(rot_c2w_gl.cols[0], -rot_c2w_gl.cols[1], -rot_c2w_gl.cols[2]);
    let rot_w2c = rot_c2w.transpose();
    let t = -(rot_w2c.mul_vec(eye));
    let fx = 0.5 * width as f64 / (0.5 * camera_angle_x).tan();
    Ok(Camera {
        fx,
        fy: fx,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        rotation: rot_w2c.to_row_major(),
        translation: [t.x, t.y, t.z],
    })
}

/// Inverse of `camera_from_transform` for writing manifests.
pub fn transform_from_camera(camera: &Camera) -> [[f64; 4]; 4] {
    let rot_w2c = camera.rotation_mat();
    let rot_c2w = rot_w2c.transpose();
    let rot_c2w_gl = Mat3::from_cols(rot_c2w.cols[0], -rot_c2w.cols[1], -rot_c2w.cols[2]);
    let eye = camera.center();
    let r = rot_c2w_gl.to_row_major();
    [
        [r[0], r[1], r[2], eye.x],
        [r[3], r[4], r[5], eye.y],
        [r[6], r[7], r[8], eye.z],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Load a transforms.json manifest plus all referenced images and masks.
/// Masks come from explicit `mask_path` entries or from the image's alpha
/// channel when present.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<View>, SceneError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| SceneError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| SceneError::Manifest(e.to_string()))?;
    if manifest.frames.is_empty() {
        return Err(SceneError::Manifest("manifest has no frames".into()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(manifest.frames.len());
    for frame in &manifest.frames {
        let mut image_path = base.join(&frame.file_path);
        if image_path.extension().is_none() {
            image_path.set_extension("png");
        }
        if !image_path.exists() {
            return Err(SceneError::MissingFile(image_path));
        }
        let (image, alpha) = crate::io::read_png(&image_path).map_err(|e| {
            SceneError::Manifest(format!("{}: {e}", image_path.display()))
        })?;
        let mask = match &frame.mask_path {
            Some(rel) => {
                let mask_path = base.join(rel);
                if !mask_path.exists() {
                    return Err(SceneError::MissingFile(mask_path));
                }
                let (mask_img, _) = crate::io::read_png(&mask_path).map_err(|e| {
                    SceneError::Manifest(format!("{}: {e}", mask_path.display()))
                })?;
                let mut grid = Grid::new(mask_img.width(), mask_img.height(), 0.0);
                for (dst, src) in grid.data_mut().iter_mut().zip(mask_img.data()) {
                    *dst = src.mean();
                }
                Some(grid)
            }
            None => alpha,
        };
        let camera = camera_from_transform(
            &frame.transform_matrix,
            manifest.camera_angle_x,
            image.width(),
            image.height(),
        )?;
        camera
            .validate()
            .map_err(|e| SceneError::Manifest(format!("{}: {e}", frame.file_path)))?;
        if let Some(m) = &mask {
            if !m.same_size(&image) {
                return Err(SceneError::Manifest(format!(
                    "{}: mask dimensions differ from image",
                    frame.file_path
                )));
            }
        }
        views.push(View {
            image,
            mask,
            camera,
            name: frame.file_path.clone(),
        });
    }
    Ok(views)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), SceneError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serialization cannot fail");
    std::fs::write(path, text).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}
