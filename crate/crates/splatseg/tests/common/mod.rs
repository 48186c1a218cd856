//! Independent oracles for the acceptance suite.
//!
//! Everything here is written against the documented pixel contract only —
//! per-pixel ray casting over *all* Gaussians (no screen-space culling, no
//! banding, no parallelism) — so agreement with the library is evidence, not
//! tautology. Shared boundary semantics (cutoff comparison, depth sign,
//! grazing-ray epsilon, termination test) are restated from the public docs.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use splatseg::instance::LabelImage;
use splatseg::render::RenderOptions;
use splatseg::scene::{CameraView, GaussianDisk, Scene};

/// One blended fragment of the naive walk.
#[derive(Clone, Copy, Debug)]
pub struct NaiveFragment {
    pub gaussian: u32,
    /// Blend weight alpha * transmittance-before.
    pub weight: f64,
}

/// Per-pixel result of the naive walk: fragments in blend order plus the
/// residual transmittance left after the walk.
#[derive(Clone, Debug)]
pub struct NaivePixel {
    pub fragments: Vec<NaiveFragment>,
    pub residual: f64,
}

/// Naive sequential rasterization of one pixel: intersect the ray with every
/// disk in the scene, sort by depth (ties by ascending index), blend front to
/// back. Returns the full fragment list so callers can fold colors, features,
/// or label attributions themselves.
pub fn naive_pixel(scene: &Scene, view: &CameraView, px: u32, py: u32, options: &RenderOptions) -> NaivePixel {
    let (origin, dir) = view.pixel_ray(px, py);
    let g_min = (-(options.cutoff_radius * options.cutoff_radius) / 2.0).exp();
    let mut hits: Vec<(f64, u32, f64)> = Vec::new();
    for (index, disk) in scene.gaussians.iter().enumerate() {
        let normal = disk.tangent_u.cross(&disk.tangent_v);
        let denom = dir.dot(&normal);
        if denom.abs() < 1e-12 {
            continue;
        }
        let depth = (disk.center - origin).dot(&normal) / denom;
        if depth <= 0.0 {
            continue;
        }
        let point = origin + dir * depth;
        let u = (point - disk.center).dot(&disk.tangent_u) / disk.scale_u;
        let v = (point - disk.center).dot(&disk.tangent_v) / disk.scale_v;
        let g = (-(u * u + v * v) / 2.0).exp();
        if g < g_min {
            continue;
        }
        hits.push((depth, index as u32, g));
    }
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let mut fragments = Vec::with_capacity(hits.len());
    let mut trans = 1.0;
    for &(_depth, index, g) in &hits {
        let alpha = (scene.gaussians[index as usize].opacity * g).min(options.alpha_clamp);
        fragments.push(NaiveFragment { gaussian: index, weight: alpha * trans });
        trans *= 1.0 - alpha;
        if 1.0 - trans >= 1.0 - options.term_eps {
            break;
        }
    }
    NaivePixel { fragments, residual: trans }
}

/// Naive full-image render: color (H*W*3), feature (H*W*d), residual (H*W).
pub struct NaiveImage {
    pub color: Vec<f64>,
    pub feature: Vec<f64>,
    pub residual: Vec<f64>,
}

pub fn naive_render(scene: &Scene, view_index: usize, options: &RenderOptions) -> NaiveImage {
    let view = &scene.views[view_index];
    let (w, h) = (view.width as usize, view.height as usize);
    let d = scene.feature_dim;
    let mut out = NaiveImage {
        color: vec![0.0; w * h * 3],
        feature: vec![0.0; w * h * d],
        residual: vec![0.0; w * h],
    };
    for py in 0..h {
        for px in 0..w {
            let pixel = naive_pixel(scene, view, px as u32, py as u32, options);
            let at = py * w + px;
            for frag in &pixel.fragments {
                let disk = &scene.gaussians[frag.gaussian as usize];
                for c in 0..3 {
                    out.color[at * 3 + c] += frag.weight * disk.color[c];
                }
                for k in 0..d {
                    out.feature[at * d + k] += frag.weight * disk.feature[k];
                }
            }
            out.residual[at] = pixel.residual;
        }
    }
    out
}

/// Brute-force label attribution for one view: per Gaussian, blend-weight mass
/// per label id (column 0 = unlabeled background). Built from `naive_pixel`,
/// so it shares nothing with the library's tracing path.
pub fn brute_trace_mass(
    scene: &Scene,
    view_index: usize,
    labels: &LabelImage,
    options: &RenderOptions,
) -> Vec<Vec<f64>> {
    let view = &scene.views[view_index];
    let (w, h) = (view.width as usize, view.height as usize);
    let n_labels = labels.num_labels as usize;
    let mut mass = vec![vec![0.0; n_labels]; scene.gaussians.len()];
    for py in 0..h {
        for px in 0..w {
            let label = labels.ids[py * w + px] as usize;
            let pixel = naive_pixel(scene, view, px as u32, py as u32, options);
            for frag in &pixel.fragments {
                mass[frag.gaussian as usize][label] += frag.weight;
            }
        }
    }
    mass
}

/// Random orthonormal tangent frame.
fn random_frame(rng: &mut ChaCha12Rng) -> (Vector3<f64>, Vector3<f64>) {
    loop {
        let a = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if a.norm() < 1e-3 {
            continue;
        }
        let tu = a.normalize();
        let b = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rejected = b - tu * b.dot(&tu);
        if rejected.norm() < 1e-3 {
            continue;
        }
        return (tu, rejected.normalize());
    }
}

/// Small random labeled scene for oracle comparisons: up to `max_gaussians`
/// arbitrarily oriented disks near the origin, `n_views` cameras on a jittered
/// ring, 16x16 images. Labels (`gt_instance`) are assigned 1..=3 or None.
pub fn random_scene(rng: &mut ChaCha12Rng, max_gaussians: usize, n_views: usize, feature_dim: usize) -> Scene {
    let n = rng.gen_range(6..=max_gaussians.max(6));
    let mut gaussians = Vec::with_capacity(n);
    for _ in 0..n {
        let (tangent_u, tangent_v) = random_frame(rng);
        gaussians.push(GaussianDisk {
            center: Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ),
            tangent_u,
            tangent_v,
            scale_u: rng.gen_range(0.15..0.9),
            scale_v: rng.gen_range(0.15..0.9),
            opacity: rng.gen_range(0.3..0.9),
            color: [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)],
            feature: (0..feature_dim).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            gt_instance: if rng.gen_bool(0.8) { Some(rng.gen_range(1..=3)) } else { None },
        });
    }
    let (width, height) = (16u32, 16u32);
    let focal = 0.5 * width as f64 / (22.5f64.to_radians()).tan();
    let mut views = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let angle = v as f64 / n_views as f64 * std::f64::consts::TAU + rng.gen_range(-0.2..0.2);
        let elevation: f64 = rng.gen_range(0.2..0.8);
        let radius: f64 = rng.gen_range(5.0..7.0);
        let eye = Vector3::new(
            radius * angle.cos() * (1.0 - elevation * elevation).sqrt(),
            radius * angle.sin() * (1.0 - elevation * elevation).sqrt(),
            radius * elevation,
        );
        views.push(CameraView::look_at(eye, Vector3::zeros(), focal, focal, width, height));
    }
    Scene { gaussians, views, feature_dim }
}

/// |a - b| relative to the larger magnitude, floored at `scale` so that
/// near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(a.abs()).max(b.abs())
}
