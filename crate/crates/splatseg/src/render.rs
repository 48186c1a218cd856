//! Software rasterizer for oriented Gaussian disks with analytic appearance
//! gradients and reverse-attribution support.
//!
//! All rendering paths (color/feature images, per-pixel contribution lists,
//! ground-truth instance maps, gradients, and the label tracing in
//! [`crate::trace`]) share one pixel walk: intersect candidate disks, drop
//! fragments with g below exp(-cutoff^2/2), depth-sort (ties by ascending
//! Gaussian index), then blend front to back with effective alpha
//! min(opacity * g, alpha_clamp), stopping once accumulated opacity reaches
//! 1 - term_eps. The walk is per-pixel and parallelized over image rows with a
//! fixed decomposition, so results are bit-identical for any worker count.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::LabelImage;
use crate::scene::{CameraView, GaussianDisk, Scene};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("view index {view} out of range for scene with {count} views")]
    ViewOutOfRange { view: usize, count: usize },
    #[error("{what} has length {got}, expected {expected}")]
    BadShape { what: &'static str, expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RenderOptions {
    /// Fragments with g < exp(-cutoff_radius^2 / 2) are skipped.
    pub cutoff_radius: f64,
    /// Effective alpha is clamped to this value from above.
    pub alpha_clamp: f64,
    /// Blending stops once accumulated opacity >= 1 - term_eps.
    pub term_eps: f64,
    /// Also blend per-Gaussian feature vectors into a feature image.
    pub with_features: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            cutoff_radius: 3.0,
            alpha_clamp: 0.99,
            term_eps: 1e-4,
            with_features: false,
        }
    }
}

/// In-plane Gaussian density at normalized offset (u, v).
pub fn gaussian_value(u: f64, v: f64) -> f64 {
    (-(u * u + v * v) / 2.0).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiskHit {
    /// Offset along tangent_u in units of scale_u.
    pub u: f64,
    /// Offset along tangent_v in units of scale_v.
    pub v: f64,
    /// Distance from the ray origin along the unit direction.
    pub depth: f64,
}

/// Intersects a unit-direction ray with the (infinite) disk plane and reports
/// normalized in-plane coordinates; None for grazing rays and hits at or
/// behind the origin.
pub fn intersect_ray_disk(origin: &Vector3<f64>, dir: &Vector3<f64>, disk: &GaussianDisk) -> Option<DiskHit> {
    let normal = disk.normal();
    let denom = dir.dot(&normal);
    if denom.abs() < 1e-12 {
        return None;
    }
    let depth = (disk.center - origin).dot(&normal) / denom;
    if depth <= 0.0 {
        return None;
    }
    let offset = origin + dir * depth - disk.center;
    Some(DiskHit {
        u: offset.dot(&disk.tangent_u) / disk.scale_u,
        v: offset.dot(&disk.tangent_v) / disk.scale_v,
        depth,
    })
}

struct SplatRecord {
    index: u32,
    center: Vector3<f64>,
    normal: Vector3<f64>,
    tangent_u: Vector3<f64>,
    tangent_v: Vector3<f64>,
    inv_scale_u: f64,
    inv_scale_v: f64,
    x_range: (u32, u32),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PixelStats {
    /// Residual transmittance after blending.
    pub residual: f64,
    /// Number of fragments blended (post-cutoff, pre-termination).
    pub fragments: u32,
}

#[derive(Clone, Copy)]
pub(crate) struct FragDetail {
    pub index: u32,
    pub g: f64,
    /// Effective alpha min(opacity * g, alpha_clamp).
    pub alpha: f64,
    /// Blend weight alpha * transmittance-before.
    pub weight: f64,
    /// Transmittance before this fragment.
    pub trans_before: f64,
}

/// Prepared per-view rasterization state: conservative screen-space culling
/// rectangles and per-row candidate lists. Candidates are stored in ascending
/// Gaussian index order so the per-pixel fragment set and its depth-sorted
/// order are independent of how pixels are distributed over workers.
pub struct ViewRaster<'a> {
    scene: &'a Scene,
    pub view: &'a CameraView,
    pub options: RenderOptions,
    eye: Vector3<f64>,
    rot_t: Matrix3<f64>,
    g_min: f64,
    splats: Vec<SplatRecord>,
    row_candidates: Vec<Vec<u32>>,
}

impl<'a> ViewRaster<'a> {
    pub fn new(scene: &'a Scene, view_index: usize, options: &RenderOptions) -> Result<ViewRaster<'a>, RenderError> {
        let view = scene.views.get(view_index).ok_or(RenderError::ViewOutOfRange {
            view: view_index,
            count: scene.views.len(),
        })?;
        let w = view.width;
        let h = view.height;
        let mut splats = Vec::new();
        let mut row_candidates = vec![Vec::new(); h as usize];
        for (i, disk) in scene.gaussians.iter().enumerate() {
            let r = options.cutoff_radius * disk.scale_u.max(disk.scale_v);
            let q = view.rotation * disk.center + view.translation;
            if q.z + r <= 0.0 {
                continue;
            }
            let (x_range, y_range) = if q.z - r <= 1e-9 {
                ((0, w - 1), (0, h - 1))
            } else {
                let xr = axis_range(q.x, q.z, r, view.fx, view.cx, w);
                let yr = axis_range(q.y, q.z, r, view.fy, view.cy, h);
                match (xr, yr) {
                    (Some(xr), Some(yr)) => (xr, yr),
                    _ => continue,
                }
            };
            let rec = SplatRecord {
                index: i as u32,
                center: disk.center,
                normal: disk.normal(),
                tangent_u: disk.tangent_u,
                tangent_v: disk.tangent_v,
                inv_scale_u: 1.0 / disk.scale_u,
                inv_scale_v: 1.0 / disk.scale_v,
                x_range,
            };
            let slot = splats.len() as u32;
            splats.push(rec);
            for y in y_range.0..=y_range.1 {
                row_candidates[y as usize].push(slot);
            }
        }
        Ok(ViewRaster {
            scene,
            view,
            options: *options,
            eye: view.eye(),
            rot_t: view.rotation.transpose(),
            g_min: (-(options.cutoff_radius * options.cutoff_radius) / 2.0).exp(),
            splats,
            row_candidates,
        })
    }

    pub fn width(&self) -> u32 {
        self.view.width
    }

    pub fn height(&self) -> u32 {
        self.view.height
    }

    fn ray_dir(&self, px: u32, py: u32) -> Vector3<f64> {
        let dx = (px as f64 + 0.5 - self.view.cx) / self.view.fx;
        let dy = (py as f64 + 0.5 - self.view.cy) / self.view.fy;
        (self.rot_t * Vector3::new(dx, dy, 1.0)).normalize()
    }

    fn collect_fragments(&self, px: u32, py: u32, frags: &mut Vec<(u32, f64, f64)>) {
        frags.clear();
        let dir = self.ray_dir(px, py);
        for &slot in &self.row_candidates[py as usize] {
            let s = &self.splats[slot as usize];
            if px < s.x_range.0 || px > s.x_range.1 {
                continue;
            }
            let denom = dir.dot(&s.normal);
            if denom.abs() < 1e-12 {
                continue;
            }
            let depth = (s.center - self.eye).dot(&s.normal) / denom;
            if depth <= 0.0 {
                continue;
            }
            let offset = self.eye + dir * depth - s.center;
            let u = offset.dot(&s.tangent_u) * s.inv_scale_u;
            let v = offset.dot(&s.tangent_v) * s.inv_scale_v;
            let g = gaussian_value(u, v);
            if g < self.g_min {
                continue;
            }
            frags.push((s.index, depth, g));
        }
        frags.sort_unstable_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    }

    /// Front-to-back blend walk; calls `visit(gaussian_index, blend_weight)`
    /// per processed fragment and returns the residual transmittance and
    /// fragment count. `scratch` is caller-provided to avoid per-pixel allocation.
    pub fn walk_pixel<F: FnMut(u32, f64)>(
        &self,
        px: u32,
        py: u32,
        scratch: &mut Vec<(u32, f64, f64)>,
        mut visit: F,
    ) -> PixelStats {
        self.collect_fragments(px, py, scratch);
        let mut trans = 1.0;
        let mut fragments = 0u32;
        for &(index, _depth, g) in scratch.iter() {
            let alpha = (self.splats_opacity(index) * g).min(self.options.alpha_clamp);
            visit(index, alpha * trans);
            trans *= 1.0 - alpha;
            fragments += 1;
            if 1.0 - trans >= 1.0 - self.options.term_eps {
                break;
            }
        }
        PixelStats { residual: trans, fragments }
    }

    fn splats_opacity(&self, index: u32) -> f64 {
        self.scene.gaussians[index as usize].opacity
    }

    pub(crate) fn walk_pixel_detailed(
        &self,
        px: u32,
        py: u32,
        scratch: &mut Vec<(u32, f64, f64)>,
        out: &mut Vec<FragDetail>,
    ) -> PixelStats {
        out.clear();
        self.collect_fragments(px, py, scratch);
        let mut trans = 1.0;
        let mut fragments = 0u32;
        for &(index, _depth, g) in scratch.iter() {
            let alpha = (self.splats_opacity(index) * g).min(self.options.alpha_clamp);
            out.push(FragDetail {
                index,
                g,
                alpha,
                weight: alpha * trans,
                trans_before: trans,
            });
            trans *= 1.0 - alpha;
            fragments += 1;
            if 1.0 - trans >= 1.0 - self.options.term_eps {
                break;
            }
        }
        PixelStats { residual: trans, fragments }
    }
}

fn axis_range(q: f64, qz: f64, r: f64, focal: f64, principal: f64, size: u32) -> Option<(u32, u32)> {
    // Conservative screen bound of the splat's bounding sphere: interval
    // endpoints of (q +- r) / (qz -+ r) with qz - r > 0.
    let near = qz - r;
    let far = qz + r;
    let lo = ((q - r) / near).min((q - r) / far);
    let hi = ((q + r) / near).max((q + r) / far);
    let p_lo = (principal + focal * lo - 0.5).floor() - 1.0;
    let p_hi = (principal + focal * hi - 0.5).ceil() + 1.0;
    if p_hi < 0.0 || p_lo > (size - 1) as f64 {
        return None;
    }
    Some((p_lo.max(0.0) as u32, p_hi.min((size - 1) as f64) as u32))
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    /// H*W*3 row-major RGB.
    pub color: Vec<f64>,
    /// H*W*feature_dim row-major, present when requested.
    pub feature: Option<Vec<f64>>,
    /// H*W residual transmittance.
    pub transmittance: Vec<f64>,
    /// Total fragments blended across the image.
    pub fragments: u64,
}

/// Rasterizes one view front to back.
pub fn render(scene: &Scene, view_index: usize, options: &RenderOptions) -> Result<RenderOutput, RenderError> {
    let raster = ViewRaster::new(scene, view_index, options)?;
    let w = raster.width() as usize;
    let h = raster.height() as usize;
    let d = if options.with_features { scene.feature_dim } else { 0 };
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, u64)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut color = vec![0.0; w * 3];
            let mut feat = vec![0.0; w * d];
            let mut trans = vec![0.0; w];
            let mut frags = 0u64;
            let mut scratch = Vec::new();
            for x in 0..w {
                let stats = raster.walk_pixel(x as u32, y as u32, &mut scratch, |idx, weight| {
                    let g = &scene.gaussians[idx as usize];
                    for c in 0..3 {
                        color[x * 3 + c] += g.color[c] * weight;
                    }
                    for k in 0..d {
                        feat[x * d + k] += g.feature[k] * weight;
                    }
                });
                trans[x] = stats.residual;
                frags += stats.fragments as u64;
            }
            (color, feat, trans, frags)
        })
        .collect();

    let mut color = Vec::with_capacity(w * h * 3);
    let mut feature = Vec::with_capacity(w * h * d);
    let mut transmittance = Vec::with_capacity(w * h);
    let mut fragments = 0u64;
    for (c, f, t, n) in rows {
        color.extend_from_slice(&c);
        feature.extend_from_slice(&f);
        transmittance.extend_from_slice(&t);
        fragments += n;
    }
    Ok(RenderOutput {
        width: w as u32,
        height: h as u32,
        color,
        feature: if options.with_features { Some(feature) } else { None },
        transmittance,
        fragments,
    })
}

#[derive(Clone, Debug)]
pub struct ContributionImage {
    pub width: u32,
    pub height: u32,
    /// Per pixel, (gaussian index, blend weight) in front-to-back order.
    pub pixels: Vec<Vec<(u32, f64)>>,
    /// Per pixel residual transmittance.
    pub residual: Vec<f64>,
    pub fragments: u64,
}

/// Records every pixel's per-Gaussian blend weights; per pixel,
/// sum(weights) + residual = 1 exactly by construction of the blend recurrence.
pub fn render_contributions(
    scene: &Scene,
    view_index: usize,
    options: &RenderOptions,
) -> Result<ContributionImage, RenderError> {
    let raster = ViewRaster::new(scene, view_index, options)?;
    let w = raster.width() as usize;
    let h = raster.height() as usize;
    let rows: Vec<(Vec<Vec<(u32, f64)>>, Vec<f64>, u64)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut pixels = Vec::with_capacity(w);
            let mut residual = vec![0.0; w];
            let mut frags = 0u64;
            let mut scratch = Vec::new();
            for x in 0..w {
                let mut list = Vec::new();
                let stats = raster.walk_pixel(x as u32, y as u32, &mut scratch, |idx, weight| {
                    list.push((idx, weight));
                });
                pixels.push(list);
                residual[x] = stats.residual;
                frags += stats.fragments as u64;
            }
            (pixels, residual, frags)
        })
        .collect();
    let mut pixels = Vec::with_capacity(w * h);
    let mut residual = Vec::with_capacity(w * h);
    let mut fragments = 0u64;
    for (p, r, n) in rows {
        pixels.extend(p);
        residual.extend_from_slice(&r);
        fragments += n;
    }
    Ok(ContributionImage {
        width: w as u32,
        height: h as u32,
        pixels,
        residual,
        fragments,
    })
}

#[derive(Clone, Debug)]
pub struct AppearanceGradients {
    /// N*3 loss gradient wrt per-Gaussian color.
    pub color: Vec<f64>,
    /// N loss gradient wrt per-Gaussian opacity.
    pub opacity: Vec<f64>,
    /// N*feature_dim loss gradient wrt per-Gaussian features, when
    /// `d_feature` was supplied.
    pub feature: Option<Vec<f64>>,
}

/// Backpropagates per-pixel loss gradients through the blend to per-Gaussian
/// color, opacity, and (optionally) feature parameters.
///
/// `d_color` is the H*W*3 loss gradient wrt the rendered color image;
/// `d_feature`, when given, is the H*W*feature_dim gradient wrt the feature
/// image. Opacity gradients include the transmittance chain through later
/// fragments; fragments clamped at alpha_clamp pass zero opacity gradient.
pub fn appearance_gradients(
    scene: &Scene,
    view_index: usize,
    options: &RenderOptions,
    d_color: &[f64],
    d_feature: Option<&[f64]>,
) -> Result<AppearanceGradients, RenderError> {
    let raster = ViewRaster::new(scene, view_index, options)?;
    let w = raster.width() as usize;
    let h = raster.height() as usize;
    let n = scene.gaussians.len();
    let d = scene.feature_dim;
    if d_color.len() != w * h * 3 {
        return Err(RenderError::BadShape { what: "d_color", expected: w * h * 3, got: d_color.len() });
    }
    if let Some(df) = d_feature {
        if df.len() != w * h * d {
            return Err(RenderError::BadShape { what: "d_feature", expected: w * h * d, got: df.len() });
        }
    }
    let want_feature = d_feature.is_some();

    // Fixed-height row bands keep accumulation order independent of worker count.
    const BAND: usize = 8;
    let bands = h.div_ceil(BAND);
    let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..bands)
        .into_par_iter()
        .map(|band| {
            let mut grad_color = vec![0.0; n * 3];
            let mut grad_opacity = vec![0.0; n];
            let mut grad_feature = vec![0.0; if want_feature { n * d } else { 0 }];
            let mut scratch = Vec::new();
            let mut frags: Vec<FragDetail> = Vec::new();
            let y_end = ((band + 1) * BAND).min(h);
            for y in band * BAND..y_end {
                for x in 0..w {
                    raster.walk_pixel_detailed(x as u32, y as u32, &mut scratch, &mut frags);
                    if frags.is_empty() {
                        continue;
                    }
                    let pix = y * w + x;
                    let dl_color = &d_color[pix * 3..pix * 3 + 3];
                    let dl_feat = d_feature.map(|df| &df[pix * d..pix * d + d]);
                    // Suffix blends: b holds sum_{k>i} value_k a_k prod_{i<j<k}(1-a_j).
                    let mut b_color = [0.0f64; 3];
                    let mut b_feat = vec![0.0f64; if want_feature { d } else { 0 }];
                    for fi in (0..frags.len()).rev() {
                        let f = &frags[fi];
                        let gi = f.index as usize;
                        let gauss = &scene.gaussians[gi];
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            grad_color[gi * 3 + c] += dl_color[c] * f.weight;
                            d_alpha += dl_color[c] * f.trans_before * (gauss.color[c] - b_color[c]);
                        }
                        if let Some(dl_feat) = dl_feat {
                            for k in 0..d {
                                grad_feature[gi * d + k] += dl_feat[k] * f.weight;
                                d_alpha += dl_feat[k] * f.trans_before * (gauss.feature[k] - b_feat[k]);
                            }
                        }
                        if gauss.opacity * f.g < raster.options.alpha_clamp {
                            grad_opacity[gi] += d_alpha * f.g;
                        }
                        for c in 0..3 {
                            b_color[c] = gauss.color[c] * f.alpha + (1.0 - f.alpha) * b_color[c];
                        }
                        if want_feature {
                            for k in 0..d {
                                b_feat[k] = gauss.feature[k] * f.alpha + (1.0 - f.alpha) * b_feat[k];
                            }
                        }
                    }
                }
            }
            (grad_color, grad_opacity, grad_feature)
        })
        .collect();

    let mut color = vec![0.0; n * 3];
    let mut opacity = vec![0.0; n];
    let mut feature = vec![0.0; if want_feature { n * d } else { 0 }];
    for (gc, go, gf) in partials {
        for (acc, x) in color.iter_mut().zip(&gc) {
            *acc += x;
        }
        for (acc, x) in opacity.iter_mut().zip(&go) {
            *acc += x;
        }
        for (acc, x) in feature.iter_mut().zip(&gf) {
            *acc += x;
        }
    }
    Ok(AppearanceGradients {
        color,
        opacity,
        feature: if want_feature { Some(feature) } else { None },
    })
}

/// Ground-truth instance map: per pixel, the gt_instance id with the largest
/// blend-weight total; 0 where the residual transmittance exceeds 0.5 or no
/// labeled Gaussian contributes. Argmax ties break toward the smaller id.
pub fn render_gt_instance_map(
    scene: &Scene,
    view_index: usize,
    options: &RenderOptions,
) -> Result<LabelImage, RenderError> {
    let raster = ViewRaster::new(scene, view_index, options)?;
    let w = raster.width() as usize;
    let h = raster.height() as usize;
    let max_id = scene.max_instance_id() as usize;
    let rows: Vec<Vec<u32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0u32; w];
            let mut scratch = Vec::new();
            let mut bucket = vec![0.0f64; max_id + 1];
            let mut touched: Vec<u32> = Vec::new();
            for x in 0..w {
                for &id in &touched {
                    bucket[id as usize] = 0.0;
                }
                touched.clear();
                let stats = raster.walk_pixel(x as u32, y as u32, &mut scratch, |idx, weight| {
                    if let Some(id) = scene.gaussians[idx as usize].gt_instance {
                        if bucket[id as usize] == 0.0 {
                            touched.push(id);
                        }
                        bucket[id as usize] += weight;
                    }
                });
                if stats.residual > 0.5 {
                    continue;
                }
                let mut best_id = 0u32;
                let mut best_mass = 0.0;
                for &id in &touched {
                    let m = bucket[id as usize];
                    if m > best_mass || (m == best_mass && best_id != 0 && id < best_id) {
                        best_mass = m;
                        best_id = id;
                    }
                }
                row[x] = best_id;
            }
            row
        })
        .collect();
    let mut ids = Vec::with_capacity(w * h);
    for row in rows {
        ids.extend(row);
    }
    Ok(LabelImage {
        width: w as u32,
        height: h as u32,
        ids,
        num_labels: max_id as u32 + 1,
    })
}

/// Blended feature vectors at selected pixels only; equals the corresponding
/// pixels of a full `with_features` render.
pub fn render_features_at(
    scene: &Scene,
    view_index: usize,
    options: &RenderOptions,
    pixels: &[(u32, u32)],
) -> Result<Vec<f64>, RenderError> {
    let raster = ViewRaster::new(scene, view_index, options)?;
    let d = scene.feature_dim;
    let mut out = vec![0.0; pixels.len() * d];
    let mut scratch = Vec::new();
    for (pi, &(px, py)) in pixels.iter().enumerate() {
        let slot = &mut out[pi * d..(pi + 1) * d];
        raster.walk_pixel(px, py, &mut scratch, |idx, weight| {
            for (k, s) in slot.iter_mut().enumerate() {
                *s += scene.gaussians[idx as usize].feature[k] * weight;
            }
        });
    }
    Ok(out)
}
