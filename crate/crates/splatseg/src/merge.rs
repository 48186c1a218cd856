//! Patch-pair similarity voting and cross-view instance association.
//!
//! Patches are keyed by (view, patch id). Two patches are compared by the
//! mean inner product of their member Gaussians' patch distributions across
//! co-visible views: every (member of A, member of B, view) triple where both
//! Gaussians are visible contributes one dot product, and for a pair living
//! in the same view that view is excluded so its by-construction-orthogonal
//! rows cannot bias the vote toward zero. Pairs scoring above the threshold
//! are unioned; union-find roots become dense global instance ids and each
//! view's map is relabeled through the equivalence.
//!
//! By bilinearity the triple sum equals, per view, the dot product of the two
//! patches' summed member rows; profiles of summed rows are built once per
//! patch, which drops the pair cost from |A|·|B| row dots to one dense dot.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{InstanceMap, LabelImage};
use crate::trace::{trace_patch_gaussians, TraceError, WeightMatrix};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("view {view} out of range (matrix has {count} views)")]
    ViewOutOfRange { view: u32, count: usize },
    #[error("{maps} instance maps for a matrix with {views} views")]
    MapCount { maps: usize, views: usize },
    #[error("view {view}: map has {map_patches} patches but the matrix was traced over {matrix_patches}")]
    PatchCountMismatch { view: usize, map_patches: u32, matrix_patches: u32 },
    #[error("hierarchy lists {given} views, expected {views}")]
    HierarchyCount { views: usize, given: usize },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Identity of one patch in one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchKey {
    pub view: u32,
    pub patch: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MergeOptions {
    /// Similarity a pair must strictly exceed to be unioned.
    pub theta: f64,
    /// Minimum row probability for a Gaussian to count as a patch member.
    pub trace_eps: f64,
}

impl Default for MergeOptions {
    fn default() -> MergeOptions {
        MergeOptions { theta: 0.5, trace_eps: 1e-4 }
    }
}

/// One scored candidate pair, in scoring order. `merged` records the
/// threshold decision, not whether the union changed anything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub view_a: u32,
    pub patch_a: u32,
    pub view_b: u32,
    pub patch_b: u32,
    pub score: f64,
    pub merged: bool,
}

/// Outcome of a merge pass over every view's patches.
#[derive(Clone, Debug)]
pub struct MergeResult {
    /// global_ids[v][p]: dense global id of patch p in view v; entry 0 is 0.
    pub global_ids: Vec<Vec<u32>>,
    /// Number of distinct global ids (ids run 1..=n_global).
    pub n_global: u32,
    /// Per-view maps relabeled through the equivalence; num_labels is
    /// n_global + 1 in every view.
    pub relabeled: Vec<LabelImage>,
    /// Every scored pair: within-view candidates by ascending view then
    /// (patch_a, patch_b), then cross-view pairs by (view_a, view_b,
    /// patch_a, patch_b).
    pub log: Vec<PairScore>,
}

/// Per-view summed member rows of one patch: dense over the view's patch ids.
struct PatchProfile {
    /// agg[v][t]: sum over visible members of their probability on patch t.
    agg: Vec<Vec<f64>>,
    /// cnt[v]: members visible in view v.
    cnt: Vec<u32>,
}

fn patch_profile(matrix: &WeightMatrix, key: PatchKey, trace_eps: f64) -> Result<PatchProfile, MergeError> {
    let n_views = matrix.n_views();
    if key.view as usize >= n_views {
        return Err(MergeError::ViewOutOfRange { view: key.view, count: n_views });
    }
    let members = trace_patch_gaussians(matrix, key.view as usize, key.patch, trace_eps)?;
    let mut agg: Vec<Vec<f64>> = (0..n_views)
        .map(|v| vec![0.0; matrix.views[v].patch_count as usize])
        .collect();
    let mut cnt = vec![0u32; n_views];
    for v in 0..n_views {
        for &i in &members {
            let row = matrix.row(v, i as usize);
            if row.is_empty() {
                continue;
            }
            cnt[v] += 1;
            for &(t, p) in row {
                agg[v][t as usize] += p;
            }
        }
    }
    Ok(PatchProfile { agg, cnt })
}

/// Mean dot product over co-visible (member, member, view) triples, with one
/// view optionally excluded. Zero when no triple exists.
fn profile_score(a: &PatchProfile, b: &PatchProfile, skip_view: Option<usize>) -> f64 {
    let mut dot_sum = 0.0;
    let mut triples = 0u64;
    for v in 0..a.cnt.len() {
        if skip_view == Some(v) || a.cnt[v] == 0 || b.cnt[v] == 0 {
            continue;
        }
        let (pa, pb) = (&a.agg[v], &b.agg[v]);
        let mut dot = 0.0;
        for t in 0..pa.len() {
            dot += pa[t] * pb[t];
        }
        dot_sum += dot;
        triples += a.cnt[v] as u64 * b.cnt[v] as u64;
    }
    if triples == 0 {
        0.0
    } else {
        dot_sum / triples as f64
    }
}

/// Similarity of two patches in [0, 1]. Symmetric bit-for-bit; 0 when the
/// pair has no co-visible member triple.
pub fn patch_similarity(
    matrix: &WeightMatrix,
    a: PatchKey,
    b: PatchKey,
    trace_eps: f64,
) -> Result<f64, MergeError> {
    let pa = patch_profile(matrix, a, trace_eps)?;
    let pb = patch_profile(matrix, b, trace_eps)?;
    let skip = (a.view == b.view).then_some(a.view as usize);
    Ok(profile_score(&pa, &pb, skip))
}

/// Union-find whose root is always the smallest dense index of its class.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Scores candidate patch pairs and unions those above `theta` into global
/// instances.
///
/// Within a view, candidates are all patch pairs unless that view has
/// hierarchy edges, in which case only pairs sharing a coarse covering mask
/// (an edge source present in both signatures) are scored. Across views all
/// pairs are candidates. Global ids are dense, assigned in ascending order of
/// each class's smallest (view, patch) key; background 0 is never touched.
pub fn merge_patches(
    matrix: &WeightMatrix,
    maps: &[InstanceMap],
    hierarchy: Option<&[Vec<(u32, u32)>]>,
    options: &MergeOptions,
) -> Result<MergeResult, MergeError> {
    let n_views = matrix.n_views();
    if maps.len() != n_views {
        return Err(MergeError::MapCount { maps: maps.len(), views: n_views });
    }
    if let Some(h) = hierarchy {
        if h.len() != n_views {
            return Err(MergeError::HierarchyCount { views: n_views, given: h.len() });
        }
    }
    for (v, map) in maps.iter().enumerate() {
        let traced = matrix.views[v].patch_count;
        if map.patch_count() != traced {
            return Err(MergeError::PatchCountMismatch {
                view: v,
                map_patches: map.patch_count(),
                matrix_patches: traced,
            });
        }
    }

    // Dense key index: view-major, patches 1..p^v.
    let mut offsets = vec![0usize; n_views + 1];
    for v in 0..n_views {
        offsets[v + 1] = offsets[v] + (matrix.views[v].patch_count as usize).saturating_sub(1);
    }
    let keys: Vec<PatchKey> = (0..n_views)
        .flat_map(|v| (1..matrix.views[v].patch_count).map(move |p| PatchKey { view: v as u32, patch: p }))
        .collect();
    let key_index = |v: usize, p: u32| offsets[v] + (p - 1) as usize;

    let profiles: Vec<PatchProfile> = keys
        .par_iter()
        .map(|&k| patch_profile(matrix, k, options.trace_eps))
        .collect::<Result<_, _>>()?;

    // Candidate list in final log order: within-view first, then cross-view.
    let mut candidates: Vec<(usize, usize, bool)> = Vec::new();
    for v in 0..n_views {
        let p_count = matrix.views[v].patch_count;
        let coarse_bits = hierarchy.and_then(|h| {
            let bits = h[v]
                .iter()
                .filter(|&&(coarse, _)| coarse < 64)
                .fold(0u64, |acc, &(coarse, _)| acc | 1u64 << coarse);
            (bits != 0).then_some(bits)
        });
        for p in 1..p_count {
            for q in p + 1..p_count {
                if let Some(bits) = coarse_bits {
                    let sig = &maps[v].signatures;
                    if sig[p as usize] & sig[q as usize] & bits == 0 {
                        continue;
                    }
                }
                candidates.push((key_index(v, p), key_index(v, q), true));
            }
        }
    }
    for va in 0..n_views {
        for vb in va + 1..n_views {
            for pa in 1..matrix.views[va].patch_count {
                for pb in 1..matrix.views[vb].patch_count {
                    candidates.push((key_index(va, pa), key_index(vb, pb), false));
                }
            }
        }
    }

    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|&(ia, ib, same_view)| {
            let skip = same_view.then_some(keys[ia].view as usize);
            profile_score(&profiles[ia], &profiles[ib], skip)
        })
        .collect();

    let mut uf = UnionFind::new(keys.len());
    let mut log = Vec::with_capacity(candidates.len());
    for (&(ia, ib, _), &score) in candidates.iter().zip(&scores) {
        let merged = score > options.theta;
        if merged {
            uf.union(ia, ib);
        }
        log.push(PairScore {
            view_a: keys[ia].view,
            patch_a: keys[ia].patch,
            view_b: keys[ib].view,
            patch_b: keys[ib].patch,
            score,
            merged,
        });
    }

    // First touch in ascending key order is each class's smallest key, so ids
    // come out dense and ordered by root key.
    let mut root_id: HashMap<usize, u32> = HashMap::new();
    let mut n_global = 0u32;
    let mut global = vec![0u32; keys.len()];
    for i in 0..keys.len() {
        let root = uf.find(i);
        let id = *root_id.entry(root).or_insert_with(|| {
            n_global += 1;
            n_global
        });
        global[i] = id;
    }

    let global_ids: Vec<Vec<u32>> = (0..n_views)
        .map(|v| {
            let p_count = matrix.views[v].patch_count;
            let mut ids = vec![0u32; p_count as usize];
            for p in 1..p_count {
                ids[p as usize] = global[key_index(v, p)];
            }
            ids
        })
        .collect();

    let relabeled: Vec<LabelImage> = (0..n_views)
        .map(|v| {
            let labels = &maps[v].labels;
            LabelImage {
                width: labels.width,
                height: labels.height,
                ids: labels.ids.iter().map(|&p| global_ids[v][p as usize]).collect(),
                num_labels: n_global + 1,
            }
        })
        .collect();

    Ok(MergeResult { global_ids, n_global, relabeled, log })
}

/// Writes the pair log as line-delimited JSON, one pair per line.
pub fn write_merge_log<W: Write>(mut out: W, log: &[PairScore]) -> std::io::Result<()> {
    for pair in log {
        serde_json::to_writer(&mut out, pair)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
