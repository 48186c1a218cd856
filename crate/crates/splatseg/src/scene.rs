//! Scene model: oriented 2D Gaussian disks, pinhole camera views, deterministic
//! synthetic scene generation, and lossless JSON serialization.
//!
//! Conventions used everywhere downstream: instance id 0 means unlabeled or
//! background, real objects start at 1; cameras are world-to-camera
//! `x_cam = R x + t` with x right, y down, z forward; pixel (px, py) has its
//! center at (px + 0.5, py + 0.5).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::sample_standard_normal;

/// Tolerance for tangent/rotation orthonormality checks.
pub const ORTHONORMAL_EPS: f64 = 1e-9;

/// File format version written by [`save_scene`].
pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scene JSON at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported scene format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid scene at {path}: {reason}")]
    Invalid { path: String, reason: String },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        path: path.into(),
        reason: reason.into(),
    }
}

/// An oriented planar Gaussian disk.
///
/// `tangent_u`/`tangent_v` span the disk plane and must be orthonormal; the
/// local density at in-plane offset (u, v) in units of (`scale_u`, `scale_v`)
/// is exp(-(u^2 + v^2) / 2).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDisk {
    pub center: Vector3<f64>,
    pub tangent_u: Vector3<f64>,
    pub tangent_v: Vector3<f64>,
    pub scale_u: f64,
    pub scale_v: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    /// Ground-truth instance id (>= 1); None for unlabeled Gaussians.
    pub gt_instance: Option<u32>,
}

impl GaussianDisk {
    pub fn normal(&self) -> Vector3<f64> {
        self.tangent_u.cross(&self.tangent_v)
    }

    fn validate(&self, path: &str, feature_dim: usize) -> Result<(), SceneError> {
        for (name, v) in [("tangent_u", &self.tangent_u), ("tangent_v", &self.tangent_v)] {
            if (v.norm() - 1.0).abs() > ORTHONORMAL_EPS {
                return Err(invalid(
                    format!("{path}.{name}"),
                    format!("not unit length (|v| = {})", v.norm()),
                ));
            }
        }
        let dot = self.tangent_u.dot(&self.tangent_v);
        if dot.abs() > ORTHONORMAL_EPS {
            return Err(invalid(
                format!("{path}.tangent_v"),
                format!("not orthogonal to tangent_u (dot = {dot})"),
            ));
        }
        if !(self.scale_u > 0.0 && self.scale_u.is_finite()) {
            return Err(invalid(format!("{path}.scale[0]"), "must be finite and > 0"));
        }
        if !(self.scale_v > 0.0 && self.scale_v.is_finite()) {
            return Err(invalid(format!("{path}.scale[1]"), "must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.opacity) || !self.opacity.is_finite() {
            return Err(invalid(format!("{path}.opacity"), "must be in [0, 1]"));
        }
        if self.feature.len() != feature_dim {
            return Err(invalid(
                format!("{path}.feature"),
                format!("length {} does not match feature_dim {}", self.feature.len(), feature_dim),
            ));
        }
        if self.gt_instance == Some(0) {
            return Err(invalid(
                format!("{path}.gt_instance"),
                "id 0 is reserved for background; object ids start at 1",
            ));
        }
        Ok(())
    }
}

/// Pinhole camera view, world-to-camera `x_cam = R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraView {
    /// Camera center in world coordinates.
    pub fn eye(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space unit ray through the center of pixel (px, py).
    pub fn pixel_ray(&self, px: u32, py: u32) -> (Vector3<f64>, Vector3<f64>) {
        let dx = (px as f64 + 0.5 - self.cx) / self.fx;
        let dy = (py as f64 + 0.5 - self.cy) / self.fy;
        let dir_cam = Vector3::new(dx, dy, 1.0);
        let dir = (self.rotation.transpose() * dir_cam).normalize();
        (self.eye(), dir)
    }

    /// Projects a world point to pixel coordinates; None if at or behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let q = self.rotation * p + self.translation;
        if q.z <= 0.0 {
            return None;
        }
        Some((self.cx + self.fx * q.x / q.z, self.cy + self.fy * q.y / q.z, q.z))
    }

    /// Look-at constructor with world up (0, 0, 1); y_cam points image-down.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> CameraView {
        let forward = (target - eye).normalize();
        let up = Vector3::new(0.0, 0.0, 1.0);
        let mut x_cam = forward.cross(&up);
        if x_cam.norm() < 1e-12 {
            x_cam = forward.cross(&Vector3::new(0.0, 1.0, 0.0));
        }
        let x_cam = x_cam.normalize();
        let y_cam = forward.cross(&x_cam);
        let rotation = Matrix3::from_rows(&[x_cam.transpose(), y_cam.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        CameraView {
            rotation,
            translation,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    fn validate(&self, path: &str) -> Result<(), SceneError> {
        let rt_r = self.rotation.transpose() * self.rotation;
        let dev = (rt_r - Matrix3::identity()).abs().max();
        if dev > ORTHONORMAL_EPS {
            return Err(invalid(
                format!("{path}.rotation"),
                format!("not orthonormal (max deviation {dev:.3e})"),
            ));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("{path}.rotation"), "determinant must be +1"));
        }
        if !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(invalid(format!("{path}.fx"), "focal lengths must be > 0"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!("{path}.width"), "image size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<GaussianDisk>,
    pub views: Vec<CameraView>,
    pub feature_dim: usize,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate(&format!("gaussians[{i}]"), self.feature_dim)?;
        }
        for (v, view) in self.views.iter().enumerate() {
            view.validate(&format!("views[{v}]"))?;
        }
        Ok(())
    }

    /// Largest gt_instance id present, or 0 when the scene is unlabeled.
    pub fn max_instance_id(&self) -> u32 {
        self.gaussians.iter().filter_map(|g| g.gt_instance).max().unwrap_or(0)
    }
}

/// Explicit placement for one axis-aligned panel (normal +z).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PanelSpec {
    pub center: [f64; 3],
    pub half_size: f64,
    /// Base disk opacity for this panel; falls back to `SceneSpec::base_opacity`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opacity: Option<f64>,
}

/// Parameters for the deterministic synthetic scene generator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneSpec {
    /// Number of labeled objects K (instance ids 1..=K).
    pub objects: usize,
    pub panels_per_object: usize,
    /// Each panel is tessellated into disks_per_side^2 disks.
    pub disks_per_side: usize,
    /// Explicit panel placement, objects * panels_per_object entries; None for
    /// the built-in staggered grid layout.
    pub panel_layout: Option<Vec<PanelSpec>>,
    /// Adds a large backdrop panel with instance id K+1.
    pub background_panel: bool,
    /// Ring cameras looking at the scene center; must be >= 8.
    pub views: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub fov_deg: f64,
    /// Camera ring radius as a multiple of the scene bounding radius.
    pub camera_distance_factor: f64,
    pub camera_elevation_deg: f64,
    pub seed: u64,
    /// In-plane disk center jitter as a fraction of the disk grid spacing.
    pub center_jitter: f64,
    /// Multiplicative disk scale jitter (fractional half-range).
    pub scale_jitter: f64,
    /// Additive opacity jitter (half-range).
    pub opacity_jitter: f64,
    pub base_opacity: f64,
    pub feature_dim: usize,
    /// Stddev for the N(0, sigma^2) feature initialization.
    pub feature_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            objects: 4,
            panels_per_object: 1,
            disks_per_side: 10,
            panel_layout: None,
            background_panel: false,
            views: 8,
            image_width: 128,
            image_height: 128,
            fov_deg: 45.0,
            camera_distance_factor: 2.2,
            camera_elevation_deg: 35.0,
            seed: 0,
            center_jitter: 0.1,
            scale_jitter: 0.1,
            opacity_jitter: 0.04,
            base_opacity: 0.92,
            feature_dim: 16,
            feature_sigma: 0.01,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + v - c, g + v - c, b + v - c]
}

/// Distinct per-object base color from a golden-angle hue walk.
pub fn object_color(id: u32) -> [f64; 3] {
    hsv_to_rgb(35.0 + id as f64 * 137.507_764, 0.75, 0.85)
}

fn auto_layout(spec: &SceneSpec) -> Vec<PanelSpec> {
    let total = spec.objects * spec.panels_per_object;
    let cols = (spec.objects as f64).sqrt().ceil() as usize;
    let rows = spec.objects.div_ceil(cols);
    let spacing = 2.6;
    let mut panels = Vec::with_capacity(total);
    for obj in 0..spec.objects {
        let col = obj % cols;
        let row = obj / cols;
        let x = (col as f64 - (cols as f64 - 1.0) / 2.0) * spacing;
        let y = (row as f64 - (rows as f64 - 1.0) / 2.0) * spacing;
        let z = obj as f64 * 0.25;
        for p in 0..spec.panels_per_object {
            panels.push(PanelSpec {
                center: [x, y, z + p as f64 * 0.12],
                half_size: 1.0,
                opacity: None,
            });
        }
    }
    panels
}

/// Builds a labeled synthetic scene: per object, axis-aligned square panels
/// tessellated into jittered Gaussian disks, plus a ring of >= 8 cameras
/// looking at the scene center. Identical specs produce byte-identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SceneError> {
    if spec.objects == 0 {
        return Err(invalid("spec.objects", "must be >= 1"));
    }
    if spec.panels_per_object == 0 || spec.disks_per_side == 0 {
        return Err(invalid("spec.panels_per_object", "panel tessellation must be >= 1"));
    }
    if spec.views < 8 {
        return Err(invalid("spec.views", "ring must have at least 8 views"));
    }
    let panels = match &spec.panel_layout {
        Some(p) => {
            let want = spec.objects * spec.panels_per_object;
            if p.len() != want {
                return Err(invalid(
                    "spec.panel_layout",
                    format!("expected {} panels, got {}", want, p.len()),
                ));
            }
            p.clone()
        }
        None => auto_layout(spec),
    };

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut gaussians = Vec::new();
    let n = spec.disks_per_side;
    for (pi, panel) in panels.iter().enumerate() {
        let object_id = (pi / spec.panels_per_object) as u32 + 1;
        let base_color = object_color(object_id);
        let base_opacity = panel.opacity.unwrap_or(spec.base_opacity);
        push_panel_disks(
            &mut gaussians,
            panel,
            n,
            object_id,
            base_color,
            base_opacity,
            spec,
            &mut rng,
        );
    }
    let mut radius: f64 = 0.0;
    for p in &panels {
        let r = (p.center[0].powi(2) + p.center[1].powi(2)).sqrt() + p.half_size * std::f64::consts::SQRT_2;
        radius = radius.max(r);
    }
    if spec.background_panel {
        let backdrop = PanelSpec {
            center: [0.0, 0.0, -0.6],
            half_size: radius * 1.25,
            opacity: Some(0.95),
        };
        let id = spec.objects as u32 + 1;
        push_panel_disks(
            &mut gaussians,
            &backdrop,
            n * 2,
            id,
            [0.35, 0.35, 0.38],
            0.95,
            spec,
            &mut rng,
        );
    }

    let fov = spec.fov_deg.to_radians();
    let fx = 0.5 * spec.image_width as f64 / (0.5 * fov).tan();
    let dist = spec.camera_distance_factor * radius;
    let elev = spec.camera_elevation_deg.to_radians();
    let mut views = Vec::with_capacity(spec.views);
    for v in 0..spec.views {
        let phi = std::f64::consts::TAU * v as f64 / spec.views as f64;
        let eye = Vector3::new(
            dist * elev.cos() * phi.cos(),
            dist * elev.cos() * phi.sin(),
            dist * elev.sin(),
        );
        views.push(CameraView::look_at(
            eye,
            Vector3::zeros(),
            fx,
            fx,
            spec.image_width,
            spec.image_height,
        ));
    }

    let scene = Scene {
        gaussians,
        views,
        feature_dim: spec.feature_dim,
    };
    scene.validate()?;
    Ok(scene)
}

#[allow(clippy::too_many_arguments)]
fn push_panel_disks(
    out: &mut Vec<GaussianDisk>,
    panel: &PanelSpec,
    n: usize,
    object_id: u32,
    base_color: [f64; 3],
    base_opacity: f64,
    spec: &SceneSpec,
    rng: &mut ChaCha12Rng,
) {
    let spacing = 2.0 * panel.half_size / n as f64;
    let base_scale = 0.75 * spacing;
    for iy in 0..n {
        for ix in 0..n {
            let ox = -panel.half_size + (ix as f64 + 0.5) * spacing;
            let oy = -panel.half_size + (iy as f64 + 0.5) * spacing;
            let jx = spec.center_jitter * spacing * sample_standard_normal(rng);
            let jy = spec.center_jitter * spacing * sample_standard_normal(rng);
            let su = base_scale * (1.0 + spec.scale_jitter * (rng.gen::<f64>() * 2.0 - 1.0));
            let sv = base_scale * (1.0 + spec.scale_jitter * (rng.gen::<f64>() * 2.0 - 1.0));
            let opacity = (base_opacity + spec.opacity_jitter * (rng.gen::<f64>() * 2.0 - 1.0)).clamp(0.05, 1.0);
            let tint = 1.0 + 0.06 * (rng.gen::<f64>() * 2.0 - 1.0);
            let color = [
                (base_color[0] * tint).clamp(0.0, 1.0),
                (base_color[1] * tint).clamp(0.0, 1.0),
                (base_color[2] * tint).clamp(0.0, 1.0),
            ];
            let feature = (0..spec.feature_dim)
                .map(|_| spec.feature_sigma * sample_standard_normal(rng))
                .collect();
            out.push(GaussianDisk {
                center: Vector3::new(panel.center[0] + ox + jx, panel.center[1] + oy + jy, panel.center[2]),
                tangent_u: Vector3::new(1.0, 0.0, 0.0),
                tangent_v: Vector3::new(0.0, 1.0, 0.0),
                scale_u: su,
                scale_v: sv,
                opacity,
                color,
                feature,
                gt_instance: Some(object_id),
            });
        }
    }
}

// --- JSON serialization -----------------------------------------------------
// Floats round-trip losslessly: serde_json emits shortest representations that
// parse back to the identical f64.

#[derive(Serialize, Deserialize)]
struct GaussianFile {
    center: [f64; 3],
    tangent_u: [f64; 3],
    tangent_v: [f64; 3],
    scale: [f64; 2],
    opacity: f64,
    color: [f64; 3],
    feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_instance: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct ViewFile {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    feature_dim: usize,
    gaussians: Vec<GaussianFile>,
    views: Vec<ViewFile>,
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl From<&Scene> for SceneFile {
    fn from(scene: &Scene) -> SceneFile {
        SceneFile {
            version: SCENE_FORMAT_VERSION,
            feature_dim: scene.feature_dim,
            gaussians: scene
                .gaussians
                .iter()
                .map(|g| GaussianFile {
                    center: arr3(&g.center),
                    tangent_u: arr3(&g.tangent_u),
                    tangent_v: arr3(&g.tangent_v),
                    scale: [g.scale_u, g.scale_v],
                    opacity: g.opacity,
                    color: g.color,
                    feature: g.feature.clone(),
                    gt_instance: g.gt_instance,
                })
                .collect(),
            views: scene
                .views
                .iter()
                .map(|v| ViewFile {
                    rotation: [
                        [v.rotation[(0, 0)], v.rotation[(0, 1)], v.rotation[(0, 2)]],
                        [v.rotation[(1, 0)], v.rotation[(1, 1)], v.rotation[(1, 2)]],
                        [v.rotation[(2, 0)], v.rotation[(2, 1)], v.rotation[(2, 2)]],
                    ],
                    translation: arr3(&v.translation),
                    fx: v.fx,
                    fy: v.fy,
                    cx: v.cx,
                    cy: v.cy,
                    width: v.width,
                    height: v.height,
                })
                .collect(),
        }
    }
}

/// Serializes the scene as pretty JSON; the output is deterministic for equal
/// scenes and round-trips through [`load_scene`] to an identical value.
pub fn save_scene<W: Write>(scene: &Scene, writer: W) -> Result<(), SceneError> {
    scene.validate()?;
    let file = SceneFile::from(scene);
    serde_json::to_writer_pretty(writer, &file).map_err(|e| SceneError::Json {
        line: 0,
        column: 0,
        message: e.to_string(),
    })
}

pub fn save_scene_to_path(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let mut buf = Vec::new();
    save_scene(scene, &mut buf)?;
    buf.push(b'\n');
    std::fs::write(path, buf)?;
    Ok(())
}

/// Parses and validates a scene; malformed JSON reports line/column, schema
/// violations report the offending field path.
pub fn load_scene<R: Read>(reader: R) -> Result<Scene, SceneError> {
    let file: SceneFile = serde_json::from_reader(reader).map_err(|e| SceneError::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if file.version != SCENE_FORMAT_VERSION {
        return Err(SceneError::Version {
            found: file.version,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    let scene = Scene {
        feature_dim: file.feature_dim,
        gaussians: file
            .gaussians
            .into_iter()
            .map(|g| GaussianDisk {
                center: vec3(g.center),
                tangent_u: vec3(g.tangent_u),
                tangent_v: vec3(g.tangent_v),
                scale_u: g.scale[0],
                scale_v: g.scale[1],
                opacity: g.opacity,
                color: g.color,
                feature: g.feature,
                gt_instance: g.gt_instance,
            })
            .collect(),
        views: file
            .views
            .into_iter()
            .map(|v| CameraView {
                rotation: Matrix3::new(
                    v.rotation[0][0],
                    v.rotation[0][1],
                    v.rotation[0][2],
                    v.rotation[1][0],
                    v.rotation[1][1],
                    v.rotation[1][2],
                    v.rotation[2][0],
                    v.rotation[2][1],
                    v.rotation[2][2],
                ),
                translation: vec3(v.translation),
                fx: v.fx,
                fy: v.fy,
                cx: v.cx,
                cy: v.cy,
                width: v.width,
                height: v.height,
            })
            .collect(),
    };
    scene.validate()?;
    Ok(scene)
}

pub fn load_scene_from_path(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let data = std::fs::read(path)?;
    load_scene(data.as_slice())
}
