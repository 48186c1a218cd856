//! Contrastive feature lifting and feature-driven object selection.
//!
//! Training pulls the per-Gaussian feature vectors of each instance together
//! and pushes instances apart, supervised only by the per-view instance maps:
//! sampled pixels whose blended features share an instance id are treated as
//! positives. On a trained scene, [`query_segment`] grows a query set from a
//! single reference mask and thresholds feature similarity into per-view
//! masks, [`extract_object`] lifts per-view masks to a 3D Gaussian subset by
//! majority vote over traced mask mass, and [`self_prompt`] drives an
//! external point-prompted segmenter across the camera ring and aggregates
//! its masks the same way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{LabelImage, Mask};
use crate::metrics::{mask_from_render, MetricsError};
use crate::render::{render, RenderError, RenderOptions, ViewRaster};
use crate::scene::Scene;
use crate::trace::{trace_mask_fraction, TraceError, TraceOptions};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("invalid configuration: {reason}")]
    Config { reason: String },
    #[error("sample {index} lies on an unlabeled pixel")]
    UnlabeledSample { index: usize },
    #[error("contrastive batch needs at least two samples, got {got}")]
    TooFewSamples { got: usize },
    #[error("feature buffer length {got} is not {n} samples x {d} dims")]
    FeatureShape { got: usize, n: usize, d: usize },
    #[error("expected one map per view ({views}), got {got}")]
    MapCount { views: usize, got: usize },
    #[error("map {view} is {got_w}x{got_h}, view is {want_w}x{want_h}")]
    MapShape { view: usize, got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
    #[error("mask for view {view} is {got_w}x{got_h}, view is {want_w}x{want_h}")]
    MaskShape { view: usize, got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
    #[error("scene feature dim {scene} does not match configured dim {config}")]
    FeatureDim { scene: usize, config: usize },
    #[error("view index {view} out of range ({views} views)")]
    ViewOutOfRange { view: usize, views: usize },
    #[error("reference mask is empty")]
    EmptyMask,
    #[error("expected one mask per view ({views}), got {got}")]
    MaskCount { views: usize, got: usize },
    #[error("prompter failed on view {view}: {reason}")]
    Prompter { view: usize, reason: String },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Similarity between two feature vectors: exp(-tau * ||a - b||^2), in (0, 1].
pub fn feature_similarity(a: &[f64], b: &[f64], tau: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-tau * d2).exp()
}

/// Batch contrastive loss over sampled pixel features.
///
/// `features` holds `labels.len()` vectors of length `d`, flattened. Each
/// sample's positive set is every sample with the same label, itself
/// included; the loss is the mean negative log ratio of exponentiated
/// positive similarity mass to total mass. Returns the loss and its gradient
/// with respect to `features` (same layout).
///
/// With `log_domain` the positive/total masses are folded in log space; the
/// similarities live in (0, 1] so both paths are stable, and they agree to
/// rounding error.
pub fn contrastive_loss(
    features: &[f64],
    d: usize,
    labels: &[u32],
    tau: f64,
    log_domain: bool,
) -> Result<(f64, Vec<f64>), LiftError> {
    if d == 0 || tau <= 0.0 || !tau.is_finite() {
        return Err(LiftError::Config { reason: format!("need d > 0 and finite tau > 0, got d={d} tau={tau}") });
    }
    let n = labels.len();
    if n < 2 {
        return Err(LiftError::TooFewSamples { got: n });
    }
    if features.len() != n * d {
        return Err(LiftError::FeatureShape { got: features.len(), n, d });
    }
    if let Some(index) = labels.iter().position(|&l| l == 0) {
        return Err(LiftError::UnlabeledSample { index });
    }

    let feat = |u: usize| &features[u * d..(u + 1) * d];
    // Dense pairwise similarities; s[u][u] = 1 (zero distance to itself).
    let mut sim = vec![1.0; n * n];
    for u in 0..n {
        for v in u + 1..n {
            let s = feature_similarity(feat(u), feat(v), tau);
            sim[u * n + v] = s;
            sim[v * n + u] = s;
        }
    }

    // Per-sample positive and total masses, either directly or in log space.
    let mut log_pos = vec![0.0; n];
    let mut log_all = vec![0.0; n];
    if log_domain {
        let lse = |terms: &mut dyn Iterator<Item = f64>| -> f64 {
            let vals: Vec<f64> = terms.collect();
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + vals.iter().map(|&s| (s - m).exp()).sum::<f64>().ln()
        };
        for u in 0..n {
            log_pos[u] = lse(
                &mut (0..n).filter(|&v| labels[v] == labels[u]).map(|v| sim[u * n + v]),
            );
            log_all[u] = lse(&mut (0..n).map(|v| sim[u * n + v]));
        }
    } else {
        for u in 0..n {
            let mut a = 0.0;
            let mut b = 0.0;
            for v in 0..n {
                let e = sim[u * n + v].exp();
                b += e;
                if labels[v] == labels[u] {
                    a += e;
                }
            }
            log_pos[u] = a.ln();
            log_all[u] = b.ln();
        }
    }
    let inv_n = 1.0 / n as f64;
    let loss = -inv_n * (0..n).map(|u| log_pos[u] - log_all[u]).sum::<f64>();

    // d loss / d sim_uv for u != v: sim_uv feeds u's and v's masses once each.
    // Self-similarity is constant, so the diagonal carries no gradient.
    let mut grad = vec![0.0; n * d];
    for u in 0..n {
        for v in u + 1..n {
            let s = sim[u * n + v];
            let same = labels[u] == labels[v];
            let softmax = |lm: f64| (s - lm).exp();
            let mut dls = -(softmax(log_all[u]) + softmax(log_all[v]));
            if same {
                dls += softmax(log_pos[u]) + softmax(log_pos[v]);
            }
            dls *= -inv_n;
            // Chain through sim = exp(-tau * d2): d sim / d f_u = -2 tau s (f_u - f_v).
            let scale = dls * s * -2.0 * tau;
            for k in 0..d {
                let diff = features[u * d + k] - features[v * d + k];
                grad[u * d + k] += scale * diff;
                grad[v * d + k] -= scale * diff;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Feature dimensionality; must match the scene.
    pub feature_dim: usize,
    pub lr: f64,
    /// Similarity bandwidth.
    pub tau: f64,
    /// Pixels sampled per step (the contrastive batch size).
    pub pixels_per_step: usize,
    pub steps: u32,
    pub seed: u64,
    /// Fold similarity masses in log space instead of summing exponentials.
    pub log_domain: bool,
    pub render: RenderOptions,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            feature_dim: 16,
            lr: 1e-5,
            tau: 0.01,
            pixels_per_step: 256,
            steps: 2000,
            seed: 0,
            log_domain: false,
            render: RenderOptions::default(),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizes per-Gaussian features against the instance maps.
///
/// Views are visited round-robin. Each step samples `pixels_per_step` labeled
/// pixels stratified by instance (uniform over the view's instances, then
/// uniform within the instance, with replacement), blends their features
/// through the fixed geometry, and takes one Adam step on the contrastive
/// loss. Geometry, colors, and opacities are untouched. Returns the trained
/// scene and the per-step loss trace; zero steps returns the scene unchanged.
pub fn train_contrastive(
    scene: &Scene,
    maps: &[&LabelImage],
    config: &ContrastiveConfig,
) -> Result<(Scene, Vec<f64>), LiftError> {
    let l = scene.views.len();
    if maps.len() != l || l == 0 {
        return Err(LiftError::MapCount { views: l, got: maps.len() });
    }
    for (v, map) in maps.iter().enumerate() {
        let view = &scene.views[v];
        if map.width != view.width || map.height != view.height {
            return Err(LiftError::MapShape {
                view: v,
                got_w: map.width,
                got_h: map.height,
                want_w: view.width,
                want_h: view.height,
            });
        }
    }
    if config.feature_dim != scene.feature_dim || config.feature_dim == 0 {
        return Err(LiftError::FeatureDim { scene: scene.feature_dim, config: config.feature_dim });
    }
    if !(config.lr > 0.0) || !(config.tau > 0.0) || config.pixels_per_step < 2 {
        return Err(LiftError::Config {
            reason: format!(
                "need lr > 0, tau > 0, pixels_per_step >= 2; got lr={} tau={} pixels={}",
                config.lr, config.tau, config.pixels_per_step
            ),
        });
    }

    // Per view: (instance id, its pixel list) for every instance present.
    let mut strata: Vec<Vec<(u32, Vec<(u32, u32)>)>> = Vec::with_capacity(l);
    for (v, map) in maps.iter().enumerate() {
        let mut per_id: Vec<Vec<(u32, u32)>> = vec![Vec::new(); map.num_labels as usize];
        for y in 0..map.height {
            for x in 0..map.width {
                let id = map.ids[(y * map.width + x) as usize];
                if id > 0 {
                    per_id[id as usize].push((x, y));
                }
            }
        }
        let groups: Vec<(u32, Vec<(u32, u32)>)> = per_id
            .into_iter()
            .enumerate()
            .filter(|(_, pxs)| !pxs.is_empty())
            .map(|(id, pxs)| (id as u32, pxs))
            .collect();
        if groups.is_empty() {
            return Err(LiftError::Config { reason: format!("view {v} has no labeled pixels to sample") });
        }
        strata.push(groups);
    }

    let d = config.feature_dim;
    let n_gauss = scene.gaussians.len();
    let mut features: Vec<f64> = Vec::with_capacity(n_gauss * d);
    for g in &scene.gaussians {
        features.extend_from_slice(&g.feature);
    }

    // Feature training never moves geometry or opacity, so the per-view
    // rasters (and every pixel's fragment weights) stay valid throughout.
    let rasters: Vec<ViewRaster> = (0..l)
        .map(|v| ViewRaster::new(scene, v, &config.render))
        .collect::<Result<_, _>>()?;

    let batch = config.pixels_per_step;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut adam_m = vec![0.0; n_gauss * d];
    let mut adam_v = vec![0.0; n_gauss * d];
    let mut losses = Vec::with_capacity(config.steps as usize);
    let mut scratch = Vec::new();

    for step in 0..config.steps {
        let v = step as usize % l;
        let groups = &strata[v];
        let raster = &rasters[v];

        let mut labels = Vec::with_capacity(batch);
        let mut frags: Vec<Vec<(u32, f64)>> = Vec::with_capacity(batch);
        let mut batch_feat = vec![0.0; batch * d];
        for u in 0..batch {
            let (id, pixels) = &groups[rng.gen_range(0..groups.len())];
            let (px, py) = pixels[rng.gen_range(0..pixels.len())];
            labels.push(*id);
            let mut list = Vec::new();
            raster.walk_pixel(px, py, &mut scratch, |idx, weight| list.push((idx, weight)));
            let slot = &mut batch_feat[u * d..(u + 1) * d];
            for &(idx, weight) in &list {
                let f = &features[idx as usize * d..(idx as usize + 1) * d];
                for k in 0..d {
                    slot[k] += weight * f[k];
                }
            }
            frags.push(list);
        }

        let (loss, grad_pix) = contrastive_loss(&batch_feat, d, &labels, config.tau, config.log_domain)?;
        losses.push(loss);

        // Pixel features are linear in Gaussian features with the walk weights.
        let mut grad = vec![0.0; n_gauss * d];
        for (u, list) in frags.iter().enumerate() {
            for &(idx, weight) in list {
                let g = &mut grad[idx as usize * d..(idx as usize + 1) * d];
                for k in 0..d {
                    g[k] += weight * grad_pix[u * d + k];
                }
            }
        }

        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for j in 0..n_gauss * d {
            adam_m[j] = ADAM_BETA1 * adam_m[j] + (1.0 - ADAM_BETA1) * grad[j];
            adam_v[j] = ADAM_BETA2 * adam_v[j] + (1.0 - ADAM_BETA2) * grad[j] * grad[j];
            features[j] -= config.lr * (adam_m[j] / bc1) / ((adam_v[j] / bc2).sqrt() + ADAM_EPS);
        }
    }

    let mut out = scene.clone();
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        g.feature.copy_from_slice(&features[i * d..(i + 1) * d]);
    }
    Ok((out, losses))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct QueryConfig {
    /// Similarity bandwidth for query/pixel feature comparison.
    pub tau: f64,
    /// Upper bound on the number of query points.
    pub max_points: usize,
    /// Stop growing the query set once the reference IoU improves less than this.
    pub min_gain: f64,
    pub trace: TraceOptions,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig { tau: 0.01, max_points: 8, min_gain: 1e-3, trace: TraceOptions::default() }
    }
}

/// Output of [`query_segment`] and [`self_prompt`].
#[derive(Clone, Debug)]
pub struct QueryResult {
    pub reference_view: usize,
    /// Pixel coordinates of the query points on the reference view (for
    /// prompt-driven selection: the initial point prompts).
    pub query_points: Vec<(u32, u32)>,
    /// Rendered features at the query points; empty for prompt-driven selection.
    pub query_features: Vec<Vec<f64>>,
    /// Acceptance threshold on max query similarity; None for prompt-driven selection.
    pub threshold: Option<f64>,
    /// One predicted mask per view.
    pub masks: Vec<Mask>,
    /// Selected Gaussian indices, ascending.
    pub selected: Vec<u32>,
}

/// Best similarity threshold against a reference mask.
///
/// Scans every distinct value of `maxsim` as a candidate threshold for the
/// predicted mask {maxsim >= theta} and returns (theta, IoU) maximizing IoU
/// against `mask`. Ties keep the higher threshold (the first maximum found
/// walking thresholds downward).
fn sweep_threshold(maxsim: &[f64], mask: &Mask) -> (f64, f64) {
    let mut order: Vec<u32> = (0..maxsim.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        maxsim[b as usize].partial_cmp(&maxsim[a as usize]).unwrap().then(a.cmp(&b))
    });
    let mask_count = mask.count();
    let mut best_iou = -1.0;
    let mut best_theta = f64::INFINITY;
    let mut inter = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let theta = maxsim[order[i] as usize];
        // Consume the whole run of equal values: a threshold cannot separate them.
        let mut j = i;
        while j < order.len() && maxsim[order[j] as usize] == theta {
            if mask.pixels[order[j] as usize] {
                inter += 1;
            }
            j += 1;
        }
        let union = mask_count + j - inter;
        let iou = inter as f64 / union as f64;
        if iou > best_iou {
            best_iou = iou;
            best_theta = theta;
        }
        i = j;
    }
    (best_theta, best_iou)
}

/// Segments the object marked by `reference_mask` across all views.
///
/// Grows a query set on the reference view: each round picks the mask pixel
/// whose rendered feature is worst covered by the current queries (ties go to
/// the pixel nearest the mask centroid, then scanline order), re-thresholds
/// max query similarity to maximize reference IoU, and stops when the IoU
/// gain falls below `min_gain` (discarding the unhelpful point), the IoU
/// reaches 1, the mask runs out of fresh pixels, or `max_points` is hit.
/// The final threshold binarizes every view, and the per-view masks are
/// lifted to a Gaussian subset by [`extract_object`].
pub fn query_segment(
    scene: &Scene,
    reference_view: usize,
    reference_mask: &Mask,
    config: &QueryConfig,
) -> Result<QueryResult, LiftError> {
    let l = scene.views.len();
    if reference_view >= l {
        return Err(LiftError::ViewOutOfRange { view: reference_view, views: l });
    }
    if scene.feature_dim == 0 {
        return Err(LiftError::Config { reason: "scene has no feature channels to query".into() });
    }
    let view = &scene.views[reference_view];
    if reference_mask.width != view.width || reference_mask.height != view.height {
        return Err(LiftError::MaskShape {
            view: reference_view,
            got_w: reference_mask.width,
            got_h: reference_mask.height,
            want_w: view.width,
            want_h: view.height,
        });
    }
    if reference_mask.is_empty() {
        return Err(LiftError::EmptyMask);
    }
    if !(config.tau > 0.0) || config.max_points == 0 {
        return Err(LiftError::Config {
            reason: format!("need tau > 0 and max_points >= 1; got tau={} max_points={}", config.tau, config.max_points),
        });
    }

    let d = scene.feature_dim;
    let feat_opts = RenderOptions { with_features: true, ..config.trace.render };
    let ref_feat = render(scene, reference_view, &feat_opts)?.feature.expect("features requested");
    let w = reference_mask.width as usize;
    let wh = w * reference_mask.height as usize;

    let mask_pixels: Vec<usize> = (0..wh).filter(|&p| reference_mask.pixels[p]).collect();
    let centroid = {
        let (sx, sy) = mask_pixels
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &p| (sx + (p % w) as f64, sy + (p / w) as f64));
        (sx / mask_pixels.len() as f64, sy / mask_pixels.len() as f64)
    };

    let mut maxsim = vec![f64::NEG_INFINITY; wh];
    let mut chosen = vec![false; wh];
    let mut query_points: Vec<(u32, u32)> = Vec::new();
    let mut query_features: Vec<Vec<f64>> = Vec::new();
    let mut prev_iou = 0.0;
    let mut threshold = f64::INFINITY;

    while query_points.len() < config.max_points {
        // Worst-covered fresh mask pixel; ties by centroid distance, then scanline.
        let next = mask_pixels
            .iter()
            .copied()
            .filter(|&p| !chosen[p])
            .min_by(|&a, &b| {
                let key = |p: usize| {
                    let (x, y) = ((p % w) as f64, (p / w) as f64);
                    let dx = x - centroid.0;
                    let dy = y - centroid.1;
                    (maxsim[p], dx * dx + dy * dy)
                };
                let (sa, da) = key(a);
                let (sb, db) = key(b);
                sa.partial_cmp(&sb).unwrap().then(da.partial_cmp(&db).unwrap()).then(a.cmp(&b))
            });
        let Some(p) = next else { break };

        let snapshot = maxsim.clone();
        chosen[p] = true;
        let f_q = ref_feat[p * d..(p + 1) * d].to_vec();
        query_points.push(((p % w) as u32, (p / w) as u32));
        for (px, slot) in maxsim.iter_mut().enumerate() {
            let s = feature_similarity(&ref_feat[px * d..(px + 1) * d], &f_q, config.tau);
            if s > *slot {
                *slot = s;
            }
        }
        query_features.push(f_q);

        let (theta, iou) = sweep_threshold(&maxsim, reference_mask);
        if query_points.len() >= 2 && iou - prev_iou < config.min_gain {
            maxsim = snapshot;
            query_points.pop();
            query_features.pop();
            break;
        }
        threshold = theta;
        prev_iou = iou;
        if iou >= 1.0 {
            break;
        }
    }

    let mut masks = Vec::with_capacity(l);
    for v in 0..l {
        let sims: Vec<f64> = if v == reference_view {
            maxsim.clone()
        } else {
            let feat = render(scene, v, &feat_opts)?.feature.expect("features requested");
            let vwh = (scene.views[v].width * scene.views[v].height) as usize;
            (0..vwh)
                .map(|px| {
                    query_features
                        .iter()
                        .map(|q| feature_similarity(&feat[px * d..(px + 1) * d], q, config.tau))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        };
        let vw = scene.views[v].width;
        let vh = scene.views[v].height;
        masks.push(Mask {
            width: vw,
            height: vh,
            pixels: sims.iter().map(|&s| s >= threshold).collect(),
        });
    }

    let extraction = extract_object(scene, &masks, &config.trace)?;
    Ok(QueryResult {
        reference_view,
        query_points,
        query_features,
        threshold: Some(threshold),
        masks,
        selected: extraction.selected,
    })
}

/// A per-view mask set lifted to 3D, plus everything it left behind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extraction {
    /// Gaussian indices selected by the majority vote, ascending.
    pub selected: Vec<u32>,
    /// All remaining indices, ascending; together they partition the scene.
    pub complement: Vec<u32>,
}

/// Lifts per-view masks to a 3D Gaussian subset.
///
/// Views with an empty mask abstain. In each voting view, a Gaussian votes
/// yes when more than half of its total blended mass lands on mask pixels;
/// Gaussians below the visibility floor in a view skip that view. Selection
/// requires a strict majority of the views a Gaussian was eligible in. With
/// no votes anywhere (all masks empty) the selection is empty, not an error.
pub fn extract_object(
    scene: &Scene,
    masks: &[Mask],
    options: &TraceOptions,
) -> Result<Extraction, LiftError> {
    let l = scene.views.len();
    if masks.len() != l {
        return Err(LiftError::MaskCount { views: l, got: masks.len() });
    }
    let n = scene.gaussians.len();
    let mut votes = vec![0u32; n];
    let mut eligible = vec![0u32; n];
    for (v, mask) in masks.iter().enumerate() {
        if mask.is_empty() {
            continue;
        }
        let mt = trace_mask_fraction(scene, v, mask, options)?;
        for i in 0..n {
            if let Some(f) = mt.fraction[i] {
                eligible[i] += 1;
                if f > 0.5 {
                    votes[i] += 1;
                }
            }
        }
    }
    let (mut selected, mut complement) = (Vec::new(), Vec::new());
    for i in 0..n {
        if eligible[i] > 0 && 2 * votes[i] > eligible[i] {
            selected.push(i as u32);
        } else {
            complement.push(i as u32);
        }
    }
    Ok(Extraction { selected, complement })
}

/// Clones a scene keeping only the Gaussians at `indices` (views unchanged).
pub fn subset_scene(scene: &Scene, indices: &[u32]) -> Scene {
    Scene {
        gaussians: indices.iter().map(|&i| scene.gaussians[i as usize].clone()).collect(),
        views: scene.views.clone(),
        feature_dim: scene.feature_dim,
    }
}

/// A point-prompted 2D segmenter, one mask per call.
///
/// Implementations may be interactive or learned; [`MaskPrompter`] replays
/// fixed masks for tests and oracle runs.
pub trait Prompter {
    /// Segments `view` around the given pixel prompts.
    fn prompt(&mut self, view: usize, points: &[(u32, u32)]) -> Result<Mask, String>;
}

/// Replays one fixed mask per view, ignoring the prompt points.
pub struct MaskPrompter {
    pub masks: Vec<Mask>,
}

impl Prompter for MaskPrompter {
    fn prompt(&mut self, view: usize, _points: &[(u32, u32)]) -> Result<Mask, String> {
        self.masks.get(view).cloned().ok_or_else(|| format!("no mask stored for view {view}"))
    }
}

/// Walks the camera ring with an external point-prompted segmenter.
///
/// Starting from `prompts` on `reference_view`, each visited view is
/// segmented by the prompter, the mask's traced mass fractions are
/// accumulated as votes, and the next view's prompts become the projected
/// centers of the three highest-vote Gaussians visible there (falling back
/// to the previous prompts when nothing qualifies). After `max_views` views
/// the vote majority picks the Gaussian subset exactly as [`extract_object`]
/// does; unvisited views get masks rendered from the selected subset.
pub fn self_prompt(
    scene: &Scene,
    reference_view: usize,
    prompts: &[(u32, u32)],
    prompter: &mut dyn Prompter,
    max_views: usize,
    options: &TraceOptions,
) -> Result<QueryResult, LiftError> {
    let l = scene.views.len();
    if reference_view >= l {
        return Err(LiftError::ViewOutOfRange { view: reference_view, views: l });
    }
    if max_views == 0 {
        return Err(LiftError::Config { reason: "max_views must be at least 1".into() });
    }

    let n = scene.gaussians.len();
    let visit: Vec<usize> = (0..max_views.min(l)).map(|k| (reference_view + k) % l).collect();
    let mut votes = vec![0u32; n];
    let mut eligible = vec![0u32; n];
    // Cumulative mask-mass fraction, the ranking signal for new prompts.
    let mut strength = vec![0.0f64; n];
    let mut masks: Vec<Option<Mask>> = vec![None; l];
    let mut current = prompts.to_vec();

    for (k, &v) in visit.iter().enumerate() {
        let mask = prompter
            .prompt(v, &current)
            .map_err(|reason| LiftError::Prompter { view: v, reason })?;
        let view = &scene.views[v];
        if mask.width != view.width || mask.height != view.height {
            return Err(LiftError::MaskShape {
                view: v,
                got_w: mask.width,
                got_h: mask.height,
                want_w: view.width,
                want_h: view.height,
            });
        }
        if !mask.is_empty() {
            let mt = trace_mask_fraction(scene, v, &mask, options)?;
            for i in 0..n {
                if let Some(f) = mt.fraction[i] {
                    eligible[i] += 1;
                    strength[i] += f;
                    if f > 0.5 {
                        votes[i] += 1;
                    }
                }
            }
        }
        masks[v] = Some(mask);

        if k + 1 < visit.len() {
            let next_view = &scene.views[visit[k + 1]];
            let mut ranked: Vec<u32> = (0..n as u32).filter(|&i| strength[i as usize] > 0.0).collect();
            ranked.sort_unstable_by(|&a, &b| {
                strength[b as usize].partial_cmp(&strength[a as usize]).unwrap().then(a.cmp(&b))
            });
            let mut next_points = Vec::new();
            for &i in &ranked {
                if next_points.len() == 3 {
                    break;
                }
                if let Some((x, y, _)) = next_view.project(&scene.gaussians[i as usize].center) {
                    if x >= 0.0 && y >= 0.0 && x < next_view.width as f64 && y < next_view.height as f64 {
                        next_points.push((x as u32, y as u32));
                    }
                }
            }
            if !next_points.is_empty() {
                current = next_points;
            }
        }
    }

    let selected: Vec<u32> =
        (0..n as u32).filter(|&i| eligible[i as usize] > 0 && 2 * votes[i as usize] > eligible[i as usize]).collect();

    let subset = subset_scene(scene, &selected);
    let mut out_masks = Vec::with_capacity(l);
    for (v, slot) in masks.into_iter().enumerate() {
        match slot {
            Some(mask) => out_masks.push(mask),
            None => {
                let render_out = render(&subset, v, &options.render)?;
                out_masks.push(mask_from_render(&render_out.color, render_out.width, render_out.height)?);
            }
        }
    }

    Ok(QueryResult {
        reference_view,
        query_points: prompts.to_vec(),
        query_features: Vec::new(),
        threshold: None,
        masks: out_masks,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::Mask;
    use crate::render::render_gt_instance_map;
    use crate::scene::{generate_scene, PanelSpec, SceneSpec};

    fn free_scene_spec() -> SceneSpec {
        SceneSpec {
            objects: 2,
            disks_per_side: 4,
            panel_layout: Some(vec![
                PanelSpec { center: [-2.2, 0.0, 0.0], half_size: 1.0, opacity: None },
                PanelSpec { center: [2.2, 0.0, 0.0], half_size: 1.0, opacity: None },
            ]),
            image_width: 48,
            image_height: 48,
            feature_dim: 4,
            feature_sigma: 0.05,
            seed: 7,
            ..SceneSpec::default()
        }
    }

    /// Two separated panels with hand-set, perfectly separated features.
    fn feature_scene() -> (Scene, Vec<LabelImage>) {
        let mut scene = generate_scene(&free_scene_spec()).unwrap();
        for g in &mut scene.gaussians {
            g.feature = match g.gt_instance {
                Some(1) => vec![1.0, 0.0, 0.0, 0.0],
                Some(2) => vec![0.0, 1.0, 0.0, 0.0],
                other => panic!("unexpected instance {other:?}"),
            };
        }
        let maps: Vec<LabelImage> = (0..scene.views.len())
            .map(|v| render_gt_instance_map(&scene, v, &RenderOptions::default()).unwrap())
            .collect();
        (scene, maps)
    }

    fn gt_masks(scene: &Scene, maps: &[LabelImage], id: u32) -> Vec<Mask> {
        (0..scene.views.len()).map(|v| Mask::from_label(&maps[v], id)).collect()
    }

    fn gt_indices(scene: &Scene, id: u32) -> Vec<u32> {
        (0..scene.gaussians.len() as u32)
            .filter(|&i| scene.gaussians[i as usize].gt_instance == Some(id))
            .collect()
    }

    fn mask_iou(a: &Mask, b: &Mask) -> f64 {
        let inter = a.pixels.iter().zip(&b.pixels).filter(|(x, y)| **x && **y).count();
        let union = a.pixels.iter().zip(&b.pixels).filter(|(x, y)| **x || **y).count();
        inter as f64 / union as f64
    }

    #[test]
    fn defaults_match_training_recipe() {
        let c = ContrastiveConfig::default();
        assert_eq!(c.feature_dim, 16);
        assert_eq!(c.lr, 1e-5);
        assert_eq!(c.tau, 0.01);
        assert!(!c.log_domain);
        let q = QueryConfig::default();
        assert_eq!(q.max_points, 8);
        assert_eq!(q.min_gain, 1e-3);
        assert_eq!(q.tau, 0.01);
    }

    #[test]
    fn single_instance_batch_has_zero_loss_and_gradient() {
        let features = vec![0.3, -0.1, 0.9, 0.2, -0.5, 0.4];
        let (loss, grad) = contrastive_loss(&features, 2, &[4, 4, 4], 0.5, false).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0), "positives == all => flat loss");
    }

    #[test]
    fn identical_features_reduce_to_label_counting() {
        // All similarities are 1, so each ratio is |same| / n regardless of tau.
        let n = 5.0;
        let expected = -(2.0 * (2.0_f64 / n).ln() + 3.0 * (3.0_f64 / n).ln()) / n;
        let features = vec![0.7; 5 * 3];
        for log_domain in [false, true] {
            let (loss, grad) = contrastive_loss(&features, 3, &[1, 1, 2, 2, 2], 0.2, log_domain).unwrap();
            assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
            assert!(grad.iter().all(|&g| g == 0.0), "zero feature differences");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = 3;
        let labels = [1u32, 2, 1, 3, 2, 1];
        let mut features: Vec<f64> = (0..labels.len() * d)
            .map(|i| ((i * 2654435761) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        let tau = 0.7;
        for log_domain in [false, true] {
            let (_, grad) = contrastive_loss(&features, d, &labels, tau, log_domain).unwrap();
            let h = 1e-6;
            for j in 0..features.len() {
                let orig = features[j];
                features[j] = orig + h;
                let (lp, _) = contrastive_loss(&features, d, &labels, tau, log_domain).unwrap();
                features[j] = orig - h;
                let (lm, _) = contrastive_loss(&features, d, &labels, tau, log_domain).unwrap();
                features[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-4, "param {j} (log={log_domain}): analytic {} vs fd {fd}", grad[j]);
            }
        }
    }

    #[test]
    fn log_domain_agrees_with_direct_summation() {
        let d = 4;
        let labels = [2u32, 2, 5, 5, 5, 9];
        let features: Vec<f64> =
            (0..labels.len() * d).map(|i| ((i * 40503) % 997) as f64 / 300.0 - 1.5).collect();
        let (l0, g0) = contrastive_loss(&features, d, &labels, 0.3, false).unwrap();
        let (l1, g1) = contrastive_loss(&features, d, &labels, 0.3, true).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn label_values_do_not_matter_only_the_partition() {
        let d = 2;
        let features: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let (l0, g0) = contrastive_loss(&features, d, &[1, 1, 2, 2, 3, 3], 0.4, false).unwrap();
        let (l1, g1) = contrastive_loss(&features, d, &[9, 9, 4, 4, 7, 7], 0.4, false).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn uniform_feature_shift_is_invariant() {
        let d = 3;
        let labels = [1u32, 2, 2, 1];
        let features: Vec<f64> = (0..12).map(|i| (i as f64 * 0.61).cos()).collect();
        let shifted: Vec<f64> = features.iter().map(|f| f + 0.125).collect();
        let (l0, g0) = contrastive_loss(&features, d, &labels, 0.4, false).unwrap();
        let (l1, g1) = contrastive_loss(&shifted, d, &labels, 0.4, false).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_batches() {
        let features = vec![0.0; 6];
        assert!(matches!(
            contrastive_loss(&features, 2, &[1, 0, 2], 0.5, false),
            Err(LiftError::UnlabeledSample { index: 1 })
        ));
        assert!(matches!(
            contrastive_loss(&features[..2], 2, &[1], 0.5, false),
            Err(LiftError::TooFewSamples { got: 1 })
        ));
        assert!(matches!(
            contrastive_loss(&features[..5], 2, &[1, 2, 1], 0.5, false),
            Err(LiftError::FeatureShape { got: 5, n: 3, d: 2 })
        ));
    }

    #[test]
    fn zero_steps_leave_the_scene_untouched() {
        let (scene, maps) = feature_scene();
        let refs: Vec<&LabelImage> = maps.iter().collect();
        let config = ContrastiveConfig { feature_dim: 4, steps: 0, ..ContrastiveConfig::default() };
        let (out, losses) = train_contrastive(&scene, &refs, &config).unwrap();
        assert!(losses.is_empty());
        for (a, b) in scene.gaussians.iter().zip(&out.gaussians) {
            assert_eq!(a.feature, b.feature);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (scene, maps) = feature_scene();
        let refs: Vec<&LabelImage> = maps.iter().collect();
        let config = ContrastiveConfig {
            feature_dim: 4,
            steps: 12,
            pixels_per_step: 16,
            lr: 1e-3,
            seed: 5,
            ..ContrastiveConfig::default()
        };
        let (a, la) = train_contrastive(&scene, &refs, &config).unwrap();
        let (b, lb) = train_contrastive(&scene, &refs, &config).unwrap();
        assert_eq!(la, lb);
        for (x, y) in a.gaussians.iter().zip(&b.gaussians) {
            assert_eq!(x.feature, y.feature);
        }
        let (c, _) = train_contrastive(&scene, &refs, &ContrastiveConfig { seed: 6, ..config }).unwrap();
        assert!(a.gaussians.iter().zip(&c.gaussians).any(|(x, y)| x.feature != y.feature));
    }

    #[test]
    fn training_improves_instance_separation() {
        let spec = free_scene_spec();
        let scene = generate_scene(&spec).unwrap();
        let maps: Vec<LabelImage> = (0..scene.views.len())
            .map(|v| render_gt_instance_map(&scene, v, &RenderOptions::default()).unwrap())
            .collect();
        let refs: Vec<&LabelImage> = maps.iter().collect();
        let config = ContrastiveConfig {
            feature_dim: 4,
            steps: 160,
            pixels_per_step: 48,
            lr: 1e-2,
            tau: 1.0,
            seed: 3,
            ..ContrastiveConfig::default()
        };
        let (trained, losses) = train_contrastive(&scene, &refs, &config).unwrap();
        assert!(losses.len() == 160);
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "loss did not drop: {} -> {}",
            losses.first().unwrap(),
            losses.last().unwrap()
        );

        // Mean same-instance vs cross-instance similarity over Gaussian features.
        let gap = |s: &Scene| {
            let (mut same, mut cross) = ((0.0, 0usize), (0.0, 0usize));
            for i in 0..s.gaussians.len() {
                for j in i + 1..s.gaussians.len() {
                    let sim = feature_similarity(&s.gaussians[i].feature, &s.gaussians[j].feature, config.tau);
                    if s.gaussians[i].gt_instance == s.gaussians[j].gt_instance {
                        same = (same.0 + sim, same.1 + 1);
                    } else {
                        cross = (cross.0 + sim, cross.1 + 1);
                    }
                }
            }
            same.0 / same.1 as f64 - cross.0 / cross.1 as f64
        };
        let before = gap(&scene);
        let after = gap(&trained);
        assert!(after > before, "separation gap did not grow: {before} -> {after}");
    }

    #[test]
    fn query_single_pixel_mask_collapses_to_one_query() {
        let (scene, maps) = feature_scene();
        let mask1 = Mask::from_label(&maps[0], 1);
        let (cx, cy) = {
            let (x0, y0, x1, y1) = mask1.bbox().unwrap();
            ((x0 + x1) / 2, (y0 + y1) / 2)
        };
        assert!(mask1.get(cx, cy), "bbox center must land on the panel");
        let mut mask = Mask::new(mask1.width, mask1.height);
        mask.set(cx, cy, true);
        let config = QueryConfig { tau: 1.0, ..QueryConfig::default() };
        let result = query_segment(&scene, 0, &mask, &config).unwrap();
        assert_eq!(result.query_points, vec![(cx, cy)]);
        assert_eq!(result.query_features.len(), 1);
        assert!(result.threshold.is_some());
        assert_eq!(result.masks.len(), scene.views.len());
    }

    #[test]
    fn query_recovers_a_panel_from_its_mask() {
        let (scene, maps) = feature_scene();
        let mask1 = Mask::from_label(&maps[0], 1);
        let config = QueryConfig { tau: 1.0, ..QueryConfig::default() };
        let result = query_segment(&scene, 0, &mask1, &config).unwrap();

        let iou = mask_iou(&result.masks[0], &mask1);
        assert!(iou > 0.8, "reference-view IoU too low: {iou}");
        assert!(!result.selected.is_empty());
        for &i in &result.selected {
            assert_eq!(scene.gaussians[i as usize].gt_instance, Some(1), "index {i}");
        }
        let object = gt_indices(&scene, 1);
        assert!(
            result.selected.len() * 10 >= object.len() * 8,
            "selected {} of {} object Gaussians",
            result.selected.len(),
            object.len()
        );
    }

    #[test]
    fn query_rejects_degenerate_inputs() {
        let (scene, maps) = feature_scene();
        let empty = Mask::new(48, 48);
        assert!(matches!(
            query_segment(&scene, 0, &empty, &QueryConfig::default()),
            Err(LiftError::EmptyMask)
        ));
        let small = Mask::new(10, 10);
        assert!(matches!(
            query_segment(&scene, 0, &small, &QueryConfig::default()),
            Err(LiftError::MaskShape { view: 0, .. })
        ));
        let mask1 = Mask::from_label(&maps[0], 1);
        assert!(matches!(
            query_segment(&scene, 99, &mask1, &QueryConfig::default()),
            Err(LiftError::ViewOutOfRange { view: 99, .. })
        ));
        let mut featureless = scene.clone();
        featureless.feature_dim = 0;
        for g in &mut featureless.gaussians {
            g.feature.clear();
        }
        assert!(matches!(
            query_segment(&featureless, 0, &mask1, &QueryConfig::default()),
            Err(LiftError::Config { .. })
        ));
    }

    #[test]
    fn extract_object_recovers_gt_instance_from_gt_masks() {
        let (scene, maps) = feature_scene();
        let masks = gt_masks(&scene, &maps, 1);
        let extraction = extract_object(&scene, &masks, &TraceOptions::default()).unwrap();
        assert_eq!(extraction.selected, gt_indices(&scene, 1));
        assert_eq!(extraction.complement, gt_indices(&scene, 2));
        let mut all: Vec<u32> = extraction.selected.iter().chain(&extraction.complement).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..scene.gaussians.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn extract_object_with_empty_masks_selects_nothing() {
        let (scene, _) = feature_scene();
        let masks: Vec<Mask> = (0..scene.views.len()).map(|_| Mask::new(48, 48)).collect();
        let extraction = extract_object(&scene, &masks, &TraceOptions::default()).unwrap();
        assert!(extraction.selected.is_empty());
        assert_eq!(extraction.complement.len(), scene.gaussians.len());
    }

    #[test]
    fn extract_object_single_view_is_a_majority_of_one() {
        let (scene, maps) = feature_scene();
        let mut masks: Vec<Mask> = (0..scene.views.len()).map(|_| Mask::new(48, 48)).collect();
        masks[0] = Mask::from_label(&maps[0], 1);
        let options = TraceOptions::default();
        let extraction = extract_object(&scene, &masks, &options).unwrap();

        let mt = trace_mask_fraction(&scene, 0, &masks[0], &options).unwrap();
        let expected: Vec<u32> = (0..scene.gaussians.len() as u32)
            .filter(|&i| matches!(mt.fraction[i as usize], Some(f) if f > 0.5))
            .collect();
        assert_eq!(extraction.selected, expected);
        assert!(!extraction.selected.is_empty());
    }

    /// Wraps fixed masks and records the prompt points each view received.
    struct RecordingPrompter {
        masks: Vec<Mask>,
        calls: Vec<(usize, Vec<(u32, u32)>)>,
    }

    impl Prompter for RecordingPrompter {
        fn prompt(&mut self, view: usize, points: &[(u32, u32)]) -> Result<Mask, String> {
            self.calls.push((view, points.to_vec()));
            Ok(self.masks[view].clone())
        }
    }

    #[test]
    fn self_prompt_with_oracle_masks_matches_extraction() {
        let (scene, maps) = feature_scene();
        let masks = gt_masks(&scene, &maps, 1);
        let expected = extract_object(&scene, &masks, &TraceOptions::default()).unwrap();

        let seed = {
            let (x0, y0, x1, y1) = masks[0].bbox().unwrap();
            ((x0 + x1) / 2, (y0 + y1) / 2)
        };
        let mut prompter = RecordingPrompter { masks: masks.clone(), calls: Vec::new() };
        let l = scene.views.len();
        let result =
            self_prompt(&scene, 0, &[seed], &mut prompter, l, &TraceOptions::default()).unwrap();

        assert_eq!(result.selected, expected.selected);
        assert_eq!(result.masks, masks, "visited views keep the prompter masks");
        assert!(result.threshold.is_none());

        // The first call sees the seed; later calls see up to three projected
        // centers of top-voted Gaussians, which all land on the object.
        assert_eq!(prompter.calls.len(), l);
        assert_eq!(prompter.calls[0], (0, vec![seed]));
        for (view, points) in &prompter.calls[1..] {
            assert!(!points.is_empty() && points.len() <= 3);
            for &(x, y) in points {
                assert!(masks[*view].get(x, y), "prompt ({x},{y}) off the object in view {view}");
            }
        }
    }

    #[test]
    fn self_prompt_single_view_renders_held_out_masks() {
        let (scene, maps) = feature_scene();
        let masks = gt_masks(&scene, &maps, 1);
        let seed = {
            let (x0, y0, x1, y1) = masks[0].bbox().unwrap();
            ((x0 + x1) / 2, (y0 + y1) / 2)
        };
        let mut prompter = MaskPrompter { masks: masks.clone() };
        let result =
            self_prompt(&scene, 0, &[seed], &mut prompter, 1, &TraceOptions::default()).unwrap();

        assert!(!result.selected.is_empty());
        for &i in &result.selected {
            assert_eq!(scene.gaussians[i as usize].gt_instance, Some(1));
        }
        assert_eq!(result.masks.len(), scene.views.len());
        // Held-out masks render the selected subset, so they cover the object
        // everywhere it is dominant (plus its soft rim) and never reach the
        // other panel.
        let scene2_masks = gt_masks(&scene, &maps, 2);
        for v in 1..scene.views.len() {
            let rendered = &result.masks[v];
            for p in 0..rendered.pixels.len() {
                assert!(
                    !masks[v].pixels[p] || rendered.pixels[p],
                    "view {v}: rendered mask misses an object pixel"
                );
                assert!(
                    !(scene2_masks[v].pixels[p] && rendered.pixels[p]),
                    "view {v}: rendered mask touches the other object"
                );
            }
            assert!(rendered.count() <= 4 * masks[v].count(), "view {v}: halo too large");
        }
    }

    #[test]
    fn self_prompt_surfaces_prompter_failures_with_the_view() {
        struct Failing;
        impl Prompter for Failing {
            fn prompt(&mut self, view: usize, _points: &[(u32, u32)]) -> Result<Mask, String> {
                if view == 2 { Err("segmenter offline".into()) } else { Ok(Mask::new(48, 48)) }
            }
        }
        let (scene, _) = feature_scene();
        let err = self_prompt(&scene, 0, &[(24, 24)], &mut Failing, 4, &TraceOptions::default())
            .unwrap_err();
        match err {
            LiftError::Prompter { view, reason } => {
                assert_eq!(view, 2);
                assert!(reason.contains("offline"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
