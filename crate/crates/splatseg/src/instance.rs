//! Binary masks, disjoint-patch instance maps, the multi-view inconsistency
//! injector, and instance-map IoU scoring.
//!
//! An instance map assigns every pixel the ID of its patch: the equivalence
//! class of pixels covered by exactly the same set of binary masks. Patch 0 is
//! reserved for pixels covered by no mask. The injector corrupts per-view
//! ground-truth masks the way independent per-view 2D segmentation does:
//! splitting an object into two sub-masks in some views, adding or
//! substituting coarse two-object masks in others, and jittering boundaries
//! morphologically.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::splitmix64;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("mask {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    MaskDimensions { index: usize, got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
    #[error("mask {index} is empty")]
    EmptyMask { index: usize },
    #[error("{got} masks in one view exceeds the supported maximum of 64")]
    TooManyMasks { got: usize },
    #[error("label images are {a_w}x{a_h} vs {b_w}x{b_h}")]
    LabelDimensions { a_w: u32, a_h: u32, b_w: u32, b_h: u32 },
    #[error("forced {op} references instance {instance} absent from view {view}")]
    MissingInstance { op: &'static str, instance: u32, view: usize },
}

/// Per-pixel label image; `num_labels` is an exclusive upper bound on the
/// stored IDs (label 0 = unlabeled/background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    /// Row-major, length width*height.
    pub ids: Vec<u32>,
    pub num_labels: u32,
}

impl LabelImage {
    pub fn new(width: u32, height: u32, num_labels: u32) -> LabelImage {
        LabelImage { width, height, ids: vec![0; (width * height) as usize], num_labels }
    }

    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.ids[(y * self.width + x) as usize]
    }

    /// IDs actually present, ascending, excluding 0.
    pub fn present_ids(&self) -> Vec<u32> {
        let mut seen = vec![false; self.num_labels as usize];
        for &id in &self.ids {
            seen[id as usize] = true;
        }
        (1..self.num_labels).filter(|&id| seen[id as usize]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    /// Row-major, length width*height.
    pub pixels: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Mask {
        Mask { width, height, pixels: vec![false; (width * height) as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.pixels[(y * self.width + x) as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    /// Pixels of `label_image` equal to `id`.
    pub fn from_label(label_image: &LabelImage, id: u32) -> Mask {
        Mask {
            width: label_image.width,
            height: label_image.height,
            pixels: label_image.ids.iter().map(|&l| l == id).collect(),
        }
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.pixels.iter().zip(&other.pixels) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 { 0.0 } else { inter as f64 / union as f64 }
    }

    /// Inclusive bounding box (x0, y0, x1, y1); None for an empty mask.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        if n == 0 { None } else { Some((sx / n as f64, sy / n as f64)) }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| a || b).collect(),
        }
    }

    /// Pixels of self outside `other`.
    pub fn difference_count(&self, other: &Mask) -> usize {
        self.pixels.iter().zip(&other.pixels).filter(|&(&a, &b)| a && !b).count()
    }

    /// Morphological dilation with a square structuring element of Chebyshev
    /// radius `r`.
    pub fn dilate(&self, r: u32) -> Mask {
        if r == 0 {
            return self.clone();
        }
        let r = r as i64;
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                'probe: for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0
                            && ny >= 0
                            && nx < self.width as i64
                            && ny < self.height as i64
                            && self.get(nx as u32, ny as u32)
                        {
                            out.set(x as u32, y as u32, true);
                            break 'probe;
                        }
                    }
                }
            }
        }
        out
    }

    /// Morphological erosion (square element, radius `r`); out-of-bounds
    /// neighbors count as off. If erosion would empty the mask, the input is
    /// returned unchanged (masks must stay non-empty).
    pub fn erode(&self, r: u32) -> Mask {
        if r == 0 {
            return self.clone();
        }
        let ri = r as i64;
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                let mut all = true;
                'probe: for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0
                            || ny < 0
                            || nx >= self.width as i64
                            || ny >= self.height as i64
                            || !self.get(nx as u32, ny as u32)
                        {
                            all = false;
                            break 'probe;
                        }
                    }
                }
                if all {
                    out.set(x as u32, y as u32, true);
                }
            }
        }
        if out.is_empty() { self.clone() } else { out }
    }
}

/// The binary masks observed in one view plus the containment hierarchy
/// between them: an edge (coarse, fine) means mask `coarse` covers mask
/// `fine`'s footprint (within the tolerance used to compute it).
#[derive(Clone, Debug)]
pub struct BinaryMaskSet {
    pub width: u32,
    pub height: u32,
    pub masks: Vec<Mask>,
    pub hierarchy: Vec<(u32, u32)>,
}

impl BinaryMaskSet {
    pub fn validate(&self) -> Result<(), InstanceError> {
        if self.masks.len() > 64 {
            return Err(InstanceError::TooManyMasks { got: self.masks.len() });
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.width != self.width || m.height != self.height {
                return Err(InstanceError::MaskDimensions {
                    index: i,
                    got_w: m.width,
                    got_h: m.height,
                    want_w: self.width,
                    want_h: self.height,
                });
            }
            if m.is_empty() {
                return Err(InstanceError::EmptyMask { index: i });
            }
        }
        Ok(())
    }
}

/// Containment edges (coarse, fine): |fine \ coarse| <= tolerance * |fine|
/// and coarse is strictly larger. Mutually-containing equal-size masks get no
/// edge, keeping the relation acyclic.
pub fn compute_hierarchy(masks: &[Mask], tolerance: f64) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    let counts: Vec<usize> = masks.iter().map(|m| m.count()).collect();
    for (j, coarse) in masks.iter().enumerate() {
        for (k, fine) in masks.iter().enumerate() {
            if j == k || counts[j] <= counts[k] {
                continue;
            }
            if fine.difference_count(coarse) as f64 <= tolerance * counts[k] as f64 {
                edges.push((j as u32, k as u32));
            }
        }
    }
    edges
}

/// Disjoint-patch decomposition of one view: labels plus per-patch pixel
/// counts and covering-mask signatures (bit i set = covered by mask i).
#[derive(Clone, Debug)]
pub struct InstanceMap {
    pub labels: LabelImage,
    /// Indexed by patch ID; entry 0 covers the unlabeled background.
    pub pixel_counts: Vec<u32>,
    /// Indexed by patch ID; signature 0 for the background entry.
    pub signatures: Vec<u64>,
}

impl InstanceMap {
    pub fn patch_count(&self) -> u32 {
        self.pixel_counts.len() as u32
    }
}

/// Overlaps all masks of a view into disjoint patches. Each distinct covering
/// signature becomes one patch; IDs are assigned in first-occurrence row-major
/// order starting at 1, and uncovered pixels keep 0.
pub fn overlap_masks(mask_set: &BinaryMaskSet) -> Result<InstanceMap, InstanceError> {
    mask_set.validate()?;
    let w = mask_set.width;
    let h = mask_set.height;
    let mut labels = LabelImage::new(w, h, 1);
    let mut by_signature: HashMap<u64, u32> = HashMap::new();
    let mut pixel_counts = vec![0u32];
    let mut signatures = vec![0u64];
    for y in 0..h {
        for x in 0..w {
            let mut sig = 0u64;
            for (mi, m) in mask_set.masks.iter().enumerate() {
                if m.get(x, y) {
                    sig |= 1 << mi;
                }
            }
            let id = if sig == 0 {
                0
            } else {
                *by_signature.entry(sig).or_insert_with(|| {
                    pixel_counts.push(0);
                    signatures.push(sig);
                    (pixel_counts.len() - 1) as u32
                })
            };
            labels.ids[(y * w + x) as usize] = id;
            pixel_counts[id as usize] += 1;
        }
    }
    labels.num_labels = pixel_counts.len() as u32;
    Ok(InstanceMap { labels, pixel_counts, signatures })
}

/// Per-instance masks of a label image: (id, mask) ascending by id, skipping 0
/// and absent ids.
pub fn masks_from_labels(labels: &LabelImage) -> Vec<(u32, Mask)> {
    labels
        .present_ids()
        .into_iter()
        .map(|id| (id, Mask::from_label(labels, id)))
        .collect()
}

/// How a two-object merge corruption manifests in the corrupted view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MergeStyle {
    /// Add the union as an extra coarse mask, keeping both fine masks; models
    /// a multi-granularity segmenter emitting object and group masks together.
    #[default]
    AddCoarse,
    /// Drop both fine masks in favor of the union; the fused view loses the
    /// boundary between the two objects entirely.
    Replace,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ForcedSplit {
    pub view: usize,
    pub instance: u32,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ForcedMerge {
    pub view: usize,
    pub instance_a: u32,
    pub instance_b: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InjectorParams {
    /// Per view, each object's mask is split with this probability.
    pub split_prob: f64,
    /// Per view, the closest pair of objects is merge-corrupted with this
    /// probability.
    pub merge_prob: f64,
    /// Chebyshev radius of the per-mask boundary dilation/erosion jitter;
    /// 0 disables it.
    pub noise_radius: u32,
    pub merge_style: MergeStyle,
    /// Containment tolerance handed to `compute_hierarchy` on the corrupted
    /// masks (fraction of the fine mask allowed outside the coarse one).
    pub hierarchy_tolerance: f64,
    pub seed: u64,
    /// Deterministic corruption: split these (view, instance) masks.
    pub forced_splits: Vec<ForcedSplit>,
    /// Deterministic corruption: merge these instance pairs.
    pub forced_merges: Vec<ForcedMerge>,
}

impl Default for InjectorParams {
    fn default() -> Self {
        InjectorParams {
            split_prob: 0.0,
            merge_prob: 0.0,
            noise_radius: 0,
            merge_style: MergeStyle::default(),
            hierarchy_tolerance: 0.1,
            seed: 0,
            forced_splits: Vec::new(),
            forced_merges: Vec::new(),
        }
    }
}

/// Splits a mask into two halves across the midpoint of its bounding box's
/// long axis. Both halves are non-empty whenever the mask spans at least two
/// pixels along that axis.
pub fn split_mask(mask: &Mask) -> (Mask, Mask) {
    let (x0, y0, x1, y1) = mask.bbox().expect("split_mask needs a non-empty mask");
    let mut a = Mask::new(mask.width, mask.height);
    let mut b = Mask::new(mask.width, mask.height);
    let split_x = x1 - x0 >= y1 - y0;
    let cut = if split_x { (x0 + x1 + 1) / 2 } else { (y0 + y1 + 1) / 2 };
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                let first = if split_x { x < cut } else { y < cut };
                if first { a.set(x, y, true) } else { b.set(x, y, true) };
            }
        }
    }
    if a.is_empty() || b.is_empty() {
        return (mask.clone(), mask.clone());
    }
    (a, b)
}

/// Corrupts per-view ground-truth instance masks the way independent 2D
/// segmentation would: object splits, coarse merges of the closest object
/// pair, and morphological boundary jitter, all seed-deterministic and
/// independent across views. Input is, per view, the (instance id, mask) list
/// from `masks_from_labels`.
pub fn inject_inconsistency(
    gt_masks_per_view: &[Vec<(u32, Mask)>],
    params: &InjectorParams,
) -> Result<Vec<BinaryMaskSet>, InstanceError> {
    let mut seed_stream = params.seed;
    let mut out = Vec::with_capacity(gt_masks_per_view.len());
    for (view, gt_masks) in gt_masks_per_view.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(&mut seed_stream));
        let (w, h) = match gt_masks.first() {
            Some((_, m)) => (m.width, m.height),
            None => {
                out.push(BinaryMaskSet { width: 0, height: 0, masks: vec![], hierarchy: vec![] });
                continue;
            }
        };
        let find = |inst: u32, op: &'static str| -> Result<usize, InstanceError> {
            gt_masks
                .iter()
                .position(|&(id, _)| id == inst)
                .ok_or(InstanceError::MissingInstance { op, instance: inst, view })
        };

        let mut split: Vec<bool> = vec![false; gt_masks.len()];
        for fs in &params.forced_splits {
            if fs.view == view {
                split[find(fs.instance, "split")?] = true;
            }
        }
        let mut merge_pairs: Vec<(usize, usize)> = Vec::new();
        for fm in &params.forced_merges {
            if fm.view == view {
                merge_pairs.push((find(fm.instance_a, "merge")?, find(fm.instance_b, "merge")?));
            }
        }
        // Random corruption draws happen in a fixed order (splits in id order,
        // then the merge coin) so the stream is stable across parameter edits.
        for s in split.iter_mut() {
            let roll = rng.gen::<f64>();
            if !*s && roll < params.split_prob {
                *s = true;
            }
        }
        let merge_roll = rng.gen::<f64>();
        if merge_pairs.is_empty() && merge_roll < params.merge_prob && gt_masks.len() >= 2 {
            let centroids: Vec<(f64, f64)> =
                gt_masks.iter().map(|(_, m)| m.centroid().expect("gt masks are non-empty")).collect();
            let mut best = (0usize, 1usize);
            let mut best_d = f64::INFINITY;
            for i in 0..centroids.len() {
                for j in i + 1..centroids.len() {
                    let d = (centroids[i].0 - centroids[j].0).powi(2) + (centroids[i].1 - centroids[j].1).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = (i, j);
                    }
                }
            }
            merge_pairs.push(best);
        }

        let merged_away: Vec<bool> = {
            let mut v = vec![false; gt_masks.len()];
            if params.merge_style == MergeStyle::Replace {
                for &(a, b) in &merge_pairs {
                    v[a] = true;
                    v[b] = true;
                }
            }
            v
        };

        let mut masks: Vec<Mask> = Vec::new();
        for (i, (_, m)) in gt_masks.iter().enumerate() {
            if merged_away[i] {
                continue;
            }
            if split[i] {
                let (a, b) = split_mask(m);
                masks.push(a);
                masks.push(b);
            } else {
                masks.push(m.clone());
            }
        }
        for &(a, b) in &merge_pairs {
            masks.push(gt_masks[a].1.union(&gt_masks[b].1));
        }

        if params.noise_radius > 0 {
            for m in masks.iter_mut() {
                *m = if rng.gen::<bool>() { m.dilate(params.noise_radius) } else { m.erode(params.noise_radius) };
            }
        }

        let hierarchy = compute_hierarchy(&masks, params.hierarchy_tolerance);
        let set = BinaryMaskSet { width: w, height: h, masks, hierarchy };
        set.validate()?;
        out.push(set);
    }
    Ok(out)
}

/// One ground-truth instance's matching outcome in `map_iou`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InstanceIou {
    pub gt_id: u32,
    /// Prediction matched to this instance; None when nothing overlapped it.
    pub pred_id: Option<u32>,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
    /// Per-instance pixel accuracy |gt ∩ pred| / |gt|.
    pub acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MapIouReport {
    pub per_instance: Vec<InstanceIou>,
    /// Mean IoU over all ground-truth instances (unmatched count as 0).
    pub mean_iou: f64,
    /// Mean per-instance pixel accuracy over all ground-truth instances.
    pub mean_acc: f64,
}

/// Greedy instance matching between a ground-truth and a predicted label
/// image: candidate (gt, pred) pairs are taken by descending intersection
/// (ties by ascending gt then pred id), each id used at most once; label 0 is
/// excluded on both sides.
pub fn map_iou(gt: &LabelImage, pred: &LabelImage) -> Result<MapIouReport, InstanceError> {
    if gt.width != pred.width || gt.height != pred.height {
        return Err(InstanceError::LabelDimensions {
            a_w: gt.width,
            a_h: gt.height,
            b_w: pred.width,
            b_h: pred.height,
        });
    }
    let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
    let mut gt_size: HashMap<u32, u64> = HashMap::new();
    let mut pred_size: HashMap<u32, u64> = HashMap::new();
    for (&g, &p) in gt.ids.iter().zip(&pred.ids) {
        if g != 0 {
            *gt_size.entry(g).or_insert(0) += 1;
        }
        if p != 0 {
            *pred_size.entry(p).or_insert(0) += 1;
        }
        if g != 0 && p != 0 {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    let mut pairs: Vec<((u32, u32), u64)> = inter.into_iter().collect();
    pairs.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut matched: HashMap<u32, (u32, u64)> = HashMap::new();
    let mut used_pred: Vec<u32> = Vec::new();
    for ((g, p), n) in pairs {
        if matched.contains_key(&g) || used_pred.contains(&p) {
            continue;
        }
        matched.insert(g, (p, n));
        used_pred.push(p);
    }
    let mut gt_ids: Vec<u32> = gt_size.keys().copied().collect();
    gt_ids.sort_unstable();
    let mut per_instance = Vec::with_capacity(gt_ids.len());
    let mut sum_iou = 0.0;
    let mut sum_acc = 0.0;
    for g in gt_ids {
        let size_g = gt_size[&g];
        let rec = match matched.get(&g) {
            Some(&(p, n)) => {
                let union = size_g + pred_size[&p] - n;
                InstanceIou {
                    gt_id: g,
                    pred_id: Some(p),
                    intersection: n,
                    union,
                    iou: n as f64 / union as f64,
                    acc: n as f64 / size_g as f64,
                }
            }
            None => InstanceIou { gt_id: g, pred_id: None, intersection: 0, union: size_g, iou: 0.0, acc: 0.0 },
        };
        sum_iou += rec.iou;
        sum_acc += rec.acc;
        per_instance.push(rec);
    }
    let n = per_instance.len().max(1) as f64;
    Ok(MapIouReport { per_instance, mean_iou: sum_iou / n, mean_acc: sum_acc / n })
}
