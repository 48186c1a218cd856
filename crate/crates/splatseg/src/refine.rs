//! Ambiguity scoring and trace-guided density control.
//!
//! A Gaussian is ambiguous when its traced patch distribution is diffuse in
//! most views it appears in: the score is the fraction of visible views whose
//! row maximum falls below `gamma`, and a score strictly above `theta_as`
//! flags the Gaussian. A control round replaces each flagged Gaussian with
//! two half-scale children sampled from the parent's own density, re-traces,
//! and removes whatever is still flagged — straddlers shrink until each child
//! commits to one instance, and those that never commit are dropped.
//! Appearance refits between rounds keep the render close to fixed targets
//! with plain projected gradient descent on color and opacity.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::LabelImage;
use crate::math::sample_standard_normal;
use crate::metrics::{psnr_full, Decibels, MetricsError};
use crate::render::{appearance_gradients, render, RenderError};
use crate::scene::{GaussianDisk, Scene};
use crate::trace::{trace_all, TraceError, TraceOptions, WeightMatrix};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("bad refine config: {reason}")]
    Config { reason: String },
    #[error("{targets} target images for a scene with {views} views")]
    TargetCount { targets: usize, views: usize },
    #[error("target {view}: expected {expected} samples, got {got}")]
    TargetShape { view: usize, expected: usize, got: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Row maxima below this count a view as undecided.
    pub gamma: f64,
    /// Ambiguity score a Gaussian must strictly exceed to be flagged.
    pub theta_as: f64,
    /// Children inherit parent scales divided by this.
    pub scale_divisor: f64,
    /// Appearance-refit iterations between density rounds.
    pub round_period: u32,
    /// Density-control rounds before stopping regardless of progress.
    pub max_rounds: u32,
    /// Initial refit step size (halved on every loss increase).
    pub refit_lr: f64,
    /// Photometric loss weight.
    pub photo_weight: f64,
    /// Trace/render options used for scoring and refitting.
    pub trace: TraceOptions,
}

impl Default for RefineConfig {
    fn default() -> RefineConfig {
        RefineConfig {
            gamma: 0.8,
            theta_as: 0.5,
            scale_divisor: 2.0,
            round_period: 1000,
            max_rounds: 5,
            refit_lr: 0.05,
            photo_weight: 1.0,
            trace: TraceOptions::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |reason: &str| Err(RefineError::Config { reason: reason.to_string() });
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.theta_as > 0.0 && self.theta_as <= 1.0) {
            return bad("theta_as must lie in (0, 1]");
        }
        if !(self.scale_divisor > 1.0) {
            return bad("scale_divisor must be > 1");
        }
        if !(self.refit_lr > 0.0 && self.refit_lr.is_finite()) {
            return bad("refit_lr must be finite and > 0");
        }
        if !(self.photo_weight > 0.0 && self.photo_weight.is_finite()) {
            return bad("photo_weight must be finite and > 0");
        }
        Ok(())
    }
}

/// Scores for one trace of the scene.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmbiguityReport {
    /// scores[i]: fraction of visible views with row max below gamma; 0.0 for
    /// invisible Gaussians.
    pub scores: Vec<f64>,
    /// visible_counts[i]: views where Gaussian i has labeled mass.
    pub visible_counts: Vec<u32>,
    /// Flagged iff visible and score strictly above theta_as.
    pub ambiguous: Vec<bool>,
    /// Visible in no view; never flagged.
    pub invisible: Vec<bool>,
    pub round: u32,
}

impl AmbiguityReport {
    pub fn n_ambiguous(&self) -> usize {
        self.ambiguous.iter().filter(|&&a| a).count()
    }

    pub fn n_invisible(&self) -> usize {
        self.invisible.iter().filter(|&&i| i).count()
    }
}

/// Scores every Gaussian of a traced matrix.
pub fn ambiguity_scores(matrix: &WeightMatrix, config: &RefineConfig, round: u32) -> AmbiguityReport {
    let n = matrix.n_gaussians();
    let mut scores = vec![0.0; n];
    let mut visible_counts = vec![0u32; n];
    let mut ambiguous = vec![false; n];
    let mut invisible = vec![false; n];
    for i in 0..n {
        let mut visible = 0u32;
        let mut undecided = 0u32;
        for view in &matrix.views {
            let row = &view.rows[i];
            if row.is_empty() {
                continue;
            }
            visible += 1;
            let max = row.iter().fold(0.0f64, |m, &(_, p)| m.max(p));
            if max < config.gamma {
                undecided += 1;
            }
        }
        visible_counts[i] = visible;
        if visible == 0 {
            invisible[i] = true;
        } else {
            scores[i] = undecided as f64 / visible as f64;
            ambiguous[i] = scores[i] > config.theta_as;
        }
    }
    AmbiguityReport { scores, visible_counts, ambiguous, invisible, round }
}

/// Splits a disk into two children: scales divided by `divisor`, centers
/// drawn from the parent's own planar density (child = center + u·s_u·t_u +
/// v·s_v·t_v with u, v standard normal), appearance copied, instance label
/// cleared. Draws exactly four samples from `rng`.
pub fn split_gaussian<R: Rng>(disk: &GaussianDisk, divisor: f64, rng: &mut R) -> (GaussianDisk, GaussianDisk) {
    let mut child = || {
        let u = sample_standard_normal(rng);
        let v = sample_standard_normal(rng);
        GaussianDisk {
            center: disk.center + disk.tangent_u * (u * disk.scale_u) + disk.tangent_v * (v * disk.scale_v),
            tangent_u: disk.tangent_u,
            tangent_v: disk.tangent_v,
            scale_u: disk.scale_u / divisor,
            scale_v: disk.scale_v / divisor,
            opacity: disk.opacity,
            color: disk.color,
            feature: disk.feature.clone(),
            gt_instance: None,
        }
    };
    let a = child();
    let b = child();
    (a, b)
}

/// Where an input Gaussian ended up after one density-control round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexFate {
    /// Survived as-is; the new index, or None if pruned after the re-trace.
    Kept(Option<u32>),
    /// Split; each child's new index, None where the child was pruned.
    Split(Option<u32>, Option<u32>),
}

/// One round's outcome. `fates` is empty when the round was a fixed point
/// (no split, no prune): indices map to themselves.
#[derive(Clone, Debug)]
pub struct DensityRound {
    pub scene: Scene,
    pub before: AmbiguityReport,
    /// Scored on a fresh trace of the returned scene.
    pub after: AmbiguityReport,
    pub fates: Vec<IndexFate>,
    pub n_split: u32,
    pub n_pruned: u32,
}

/// Trace → score → split flagged Gaussians in place → re-trace → prune
/// whatever is still flagged. Only re-trace-flagged Gaussians are removed.
pub fn density_control_round<R: Rng>(
    scene: &Scene,
    maps: &[&LabelImage],
    config: &RefineConfig,
    rng: &mut R,
    round: u32,
) -> Result<DensityRound, RefineError> {
    config.validate()?;
    let (matrix, _) = trace_all(scene, maps, &config.trace)?;
    let before = ambiguity_scores(&matrix, config, round);

    if before.n_ambiguous() == 0 {
        let after = before.clone();
        return Ok(DensityRound {
            scene: scene.clone(),
            before,
            after,
            fates: Vec::new(),
            n_split: 0,
            n_pruned: 0,
        });
    }

    // Children replace their parent consecutively, keeping unsplit order.
    let mut mid = Vec::with_capacity(scene.gaussians.len());
    // mid_slots[old]: indices the old Gaussian occupies in the mid scene.
    let mut mid_slots: Vec<(u32, Option<u32>)> = Vec::with_capacity(scene.gaussians.len());
    let mut n_split = 0u32;
    for (i, disk) in scene.gaussians.iter().enumerate() {
        if before.ambiguous[i] {
            let (a, b) = split_gaussian(disk, config.scale_divisor, rng);
            mid_slots.push((mid.len() as u32, Some(mid.len() as u32 + 1)));
            mid.push(a);
            mid.push(b);
            n_split += 1;
        } else {
            mid_slots.push((mid.len() as u32, None));
            mid.push(disk.clone());
        }
    }
    let mid_scene = Scene { gaussians: mid, views: scene.views.clone(), feature_dim: scene.feature_dim };

    let (mid_matrix, _) = trace_all(&mid_scene, maps, &config.trace)?;
    let mid_report = ambiguity_scores(&mid_matrix, config, round);

    // Prune every still-flagged Gaussian, survivor or child.
    let mut final_index = vec![None; mid_scene.gaussians.len()];
    let mut kept = Vec::with_capacity(mid_scene.gaussians.len());
    for (j, disk) in mid_scene.gaussians.into_iter().enumerate() {
        if !mid_report.ambiguous[j] {
            final_index[j] = Some(kept.len() as u32);
            kept.push(disk);
        }
    }
    let n_pruned = final_index.iter().filter(|f| f.is_none()).count() as u32;
    let fates = mid_slots
        .iter()
        .map(|&(a, b)| match b {
            Some(b) => IndexFate::Split(final_index[a as usize], final_index[b as usize]),
            None => IndexFate::Kept(final_index[a as usize]),
        })
        .collect();

    let scene_out = Scene { gaussians: kept, views: scene.views.clone(), feature_dim: scene.feature_dim };
    let (after_matrix, _) = trace_all(&scene_out, maps, &config.trace)?;
    let after = ambiguity_scores(&after_matrix, config, round);

    Ok(DensityRound { scene: scene_out, before, after, fates, n_split, n_pruned })
}

/// Loss history of an appearance refit; non-increasing by construction.
#[derive(Clone, Debug)]
pub struct RefitTrace {
    pub losses: Vec<f64>,
    pub final_lr: f64,
}

fn check_targets(scene: &Scene, targets: &[Vec<f64>]) -> Result<(), RefineError> {
    if targets.len() != scene.views.len() {
        return Err(RefineError::TargetCount { targets: targets.len(), views: scene.views.len() });
    }
    for (v, (view, target)) in scene.views.iter().zip(targets).enumerate() {
        let expected = (view.width as usize) * (view.height as usize) * 3;
        if target.len() != expected {
            return Err(RefineError::TargetShape { view: v, expected, got: target.len() });
        }
    }
    Ok(())
}

/// Full-batch projected gradient descent of color and opacity toward fixed
/// per-view target images under mean-squared error. A step that increases
/// the loss is reverted and the step size halved, so the recorded loss
/// sequence never increases. Geometry and features stay untouched.
pub fn refine_appearance(
    scene: &mut Scene,
    targets: &[Vec<f64>],
    iters: u32,
    lr: f64,
    config: &RefineConfig,
) -> Result<RefitTrace, RefineError> {
    config.validate()?;
    check_targets(scene, targets)?;
    let options = &config.trace.render;
    let n_views = scene.views.len();
    let total_samples: usize = targets.iter().map(|t| t.len()).sum();
    let n = scene.gaussians.len();

    // One render pass per iteration: the pass that evaluates a step also
    // provides the gradient for the next one.
    let eval = |scene: &Scene| -> Result<(f64, Vec<Vec<f64>>), RefineError> {
        let mut loss = 0.0;
        let mut diffs = Vec::with_capacity(n_views);
        for v in 0..n_views {
            let out = render(scene, v, options)?;
            let diff: Vec<f64> = out.color.iter().zip(&targets[v]).map(|(c, t)| c - t).collect();
            loss += diff.iter().map(|d| d * d).sum::<f64>();
            diffs.push(diff);
        }
        Ok((config.photo_weight * loss / total_samples as f64, diffs))
    };

    let mut lr = lr;
    let (mut loss, mut diffs) = eval(scene)?;
    let mut losses = vec![loss];
    for _ in 0..iters {
        if loss == 0.0 || lr < 1e-12 {
            losses.push(loss);
            continue;
        }
        let grad_scale = 2.0 * config.photo_weight / total_samples as f64;
        let mut g_color = vec![0.0; n * 3];
        let mut g_opacity = vec![0.0; n];
        for v in 0..n_views {
            let d_color: Vec<f64> = diffs[v].iter().map(|d| d * grad_scale).collect();
            let grads = appearance_gradients(scene, v, options, &d_color, None)?;
            for (acc, g) in g_color.iter_mut().zip(&grads.color) {
                *acc += g;
            }
            for (acc, g) in g_opacity.iter_mut().zip(&grads.opacity) {
                *acc += g;
            }
        }
        let saved: Vec<([f64; 3], f64)> = scene.gaussians.iter().map(|g| (g.color, g.opacity)).collect();
        for (i, disk) in scene.gaussians.iter_mut().enumerate() {
            for c in 0..3 {
                disk.color[c] = (disk.color[c] - lr * g_color[i * 3 + c]).clamp(0.0, 1.0);
            }
            disk.opacity = (disk.opacity - lr * g_opacity[i]).clamp(0.0, 1.0);
        }
        let (new_loss, new_diffs) = eval(scene)?;
        if new_loss > loss {
            for (disk, &(color, opacity)) in scene.gaussians.iter_mut().zip(&saved) {
                disk.color = color;
                disk.opacity = opacity;
            }
            lr /= 2.0;
        } else {
            loss = new_loss;
            diffs = new_diffs;
        }
        losses.push(loss);
    }
    Ok(RefitTrace { losses, final_lr: lr })
}

/// One line of the refinement log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Gaussians in the scene at the end of the round.
    pub n_gaussians: usize,
    /// Still-ambiguous count on the end-of-round trace.
    pub n_ambiguous: usize,
    pub n_split: u32,
    pub n_pruned: u32,
    /// Render-vs-target PSNR pooled over all views at the end of the round.
    pub psnr: Decibels,
}

#[derive(Clone, Debug)]
pub struct RefinementOutcome {
    pub scene: Scene,
    pub rounds: Vec<RoundRecord>,
    /// reports[0] scores the input scene; reports[k] scores the scene after
    /// round k.
    pub reports: Vec<AmbiguityReport>,
}

fn pooled_psnr(scene: &Scene, targets: &[Vec<f64>], config: &RefineConfig) -> Result<Decibels, RefineError> {
    let mut rendered = Vec::new();
    let mut reference = Vec::new();
    for v in 0..scene.views.len() {
        rendered.extend(render(scene, v, &config.trace.render)?.color);
        reference.extend(targets[v].iter().copied());
    }
    Ok(psnr_full(&rendered, &reference)?)
}

/// Alternates `round_period` appearance-refit iterations with one density
/// round, stopping when nothing is ambiguous or `max_rounds` is exhausted.
/// `max_rounds` 0 refits appearance once and leaves geometry alone.
pub fn run_refinement<R: Rng>(
    scene: &Scene,
    maps: &[&LabelImage],
    targets: &[Vec<f64>],
    config: &RefineConfig,
    rng: &mut R,
) -> Result<RefinementOutcome, RefineError> {
    config.validate()?;
    check_targets(scene, targets)?;
    let mut scene = scene.clone();
    let mut rounds = Vec::new();
    let mut reports = Vec::new();

    let (matrix, _) = trace_all(&scene, maps, &config.trace)?;
    reports.push(ambiguity_scores(&matrix, config, 0));

    if config.max_rounds == 0 {
        refine_appearance(&mut scene, targets, config.round_period, config.refit_lr, config)?;
        let n_ambiguous = reports[0].n_ambiguous();
        rounds.push(RoundRecord {
            round: 0,
            n_gaussians: scene.gaussians.len(),
            n_ambiguous,
            n_split: 0,
            n_pruned: 0,
            psnr: pooled_psnr(&scene, targets, config)?,
        });
        return Ok(RefinementOutcome { scene, rounds, reports });
    }

    for round in 1..=config.max_rounds {
        refine_appearance(&mut scene, targets, config.round_period, config.refit_lr, config)?;
        let outcome = density_control_round(&scene, maps, config, rng, round)?;
        scene = outcome.scene;
        rounds.push(RoundRecord {
            round,
            n_gaussians: scene.gaussians.len(),
            n_ambiguous: outcome.after.n_ambiguous(),
            n_split: outcome.n_split,
            n_pruned: outcome.n_pruned,
            psnr: pooled_psnr(&scene, targets, config)?,
        });
        reports.push(outcome.after);
        if reports.last().map_or(0, AmbiguityReport::n_ambiguous) == 0 {
            break;
        }
    }
    Ok(RefinementOutcome { scene, rounds, reports })
}

/// Writes round records as line-delimited JSON.
pub fn write_refine_log<W: Write>(mut out: W, rounds: &[RoundRecord]) -> std::io::Result<()> {
    for record in rounds {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_gt_instance_map, RenderOptions};
    use crate::scene::{generate_scene, PanelSpec, SceneSpec};
    use crate::trace::ViewWeightRows;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn view_rows(patch_count: u32, rows: Vec<Vec<(u32, f64)>>) -> ViewWeightRows {
        let mass = rows.iter().map(|r| if r.is_empty() { 0.0 } else { 1.0 }).collect();
        ViewWeightRows { patch_count, rows, mass }
    }

    #[test]
    fn one_hot_rows_are_never_ambiguous() {
        let matrix = WeightMatrix::from_views(vec![
            view_rows(2, vec![vec![(1, 1.0)]]),
            view_rows(2, vec![vec![(1, 1.0)]]),
        ]);
        let report = ambiguity_scores(&matrix, &RefineConfig::default(), 1);
        assert_eq!(report.scores, vec![0.0]);
        assert_eq!(report.visible_counts, vec![2]);
        assert!(!report.ambiguous[0]);
        assert!(!report.invisible[0]);
    }

    #[test]
    fn half_undecided_is_not_ambiguous_at_strict_threshold() {
        // Maxima 0.9 and 0.6 against gamma 0.8: one undecided of two.
        let matrix = WeightMatrix::from_views(vec![
            view_rows(3, vec![vec![(1, 0.9), (2, 0.1)]]),
            view_rows(3, vec![vec![(1, 0.6), (2, 0.4)]]),
        ]);
        let report = ambiguity_scores(&matrix, &RefineConfig::default(), 1);
        assert_eq!(report.scores, vec![0.5]);
        assert!(!report.ambiguous[0], "0.5 is not strictly above theta_as");
    }

    #[test]
    fn all_undecided_is_ambiguous() {
        let matrix = WeightMatrix::from_views(vec![
            view_rows(3, vec![vec![(1, 0.7), (2, 0.3)]]),
            view_rows(3, vec![vec![(1, 0.6), (2, 0.4)]]),
            view_rows(3, vec![vec![(1, 0.75), (2, 0.25)]]),
        ]);
        let report = ambiguity_scores(&matrix, &RefineConfig::default(), 2);
        assert_eq!(report.scores, vec![1.0]);
        assert!(report.ambiguous[0]);
        assert_eq!(report.round, 2);
    }

    #[test]
    fn max_exactly_gamma_counts_as_decided() {
        let matrix = WeightMatrix::from_views(vec![view_rows(3, vec![vec![(1, 0.8), (2, 0.2)]])]);
        let report = ambiguity_scores(&matrix, &RefineConfig::default(), 0);
        assert_eq!(report.scores, vec![0.0]);
    }

    #[test]
    fn invisible_gaussians_are_flagged_separately() {
        let matrix = WeightMatrix::from_views(vec![view_rows(2, vec![vec![], vec![(1, 1.0)]])]);
        let report = ambiguity_scores(&matrix, &RefineConfig::default(), 0);
        assert!(report.invisible[0]);
        assert!(!report.ambiguous[0]);
        assert_eq!(report.scores[0], 0.0);
        assert_eq!(report.n_invisible(), 1);
    }

    fn unit_disk() -> GaussianDisk {
        GaussianDisk {
            center: Vector3::new(1.0, -2.0, 3.0),
            tangent_u: Vector3::x(),
            tangent_v: Vector3::y(),
            scale_u: 0.4,
            scale_v: 0.2,
            opacity: 0.9,
            color: [0.2, 0.5, 0.7],
            feature: vec![0.1, -0.2],
            gt_instance: Some(4),
        }
    }

    #[test]
    fn split_halves_scales_and_copies_appearance() {
        let disk = unit_disk();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (a, b) = split_gaussian(&disk, 2.0, &mut rng);
        for child in [&a, &b] {
            assert_eq!(child.scale_u, 0.2);
            assert_eq!(child.scale_v, 0.1);
            assert_eq!(child.opacity, disk.opacity);
            assert_eq!(child.color, disk.color);
            assert_eq!(child.feature, disk.feature);
            assert_eq!(child.gt_instance, None);
            assert_eq!(child.tangent_u, disk.tangent_u);
            // Children stay on the parent plane.
            assert!((child.center - disk.center).dot(&disk.normal()).abs() < 1e-12);
        }
        assert_ne!(a.center, b.center);

        let mut rng2 = ChaCha12Rng::seed_from_u64(5);
        let (a2, b2) = split_gaussian(&disk, 2.0, &mut rng2);
        assert_eq!(a.center, a2.center);
        assert_eq!(b.center, b2.center);
    }

    #[test]
    fn split_centers_follow_the_parent_density() {
        let disk = unit_disk();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let n = 10_000;
        let (mut mu, mut mv) = (0.0, 0.0);
        let (mut cuu, mut cvv, mut cuv) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (a, _) = split_gaussian(&disk, 2.0, &mut rng);
            let d = a.center - disk.center;
            let u = d.dot(&disk.tangent_u);
            let v = d.dot(&disk.tangent_v);
            mu += u;
            mv += v;
            cuu += u * u;
            cvv += v * v;
            cuv += u * v;
        }
        let n = n as f64;
        assert!((mu / n).abs() < 0.02 && (mv / n).abs() < 0.01);
        let var_u = cuu / n - (mu / n) * (mu / n);
        let var_v = cvv / n - (mv / n) * (mv / n);
        assert!((var_u - disk.scale_u * disk.scale_u).abs() < 0.05 * disk.scale_u * disk.scale_u, "{var_u}");
        assert!((var_v - disk.scale_v * disk.scale_v).abs() < 0.05 * disk.scale_v * disk.scale_v, "{var_v}");
        assert!((cuv / n).abs() < 0.05 * disk.scale_u * disk.scale_v);
    }

    /// Two separated panels plus one oversized disk straddling both.
    fn straddler_scene() -> (Scene, Vec<LabelImage>) {
        let spec = SceneSpec {
            objects: 2,
            disks_per_side: 4,
            panel_layout: Some(vec![
                PanelSpec { center: [-2.2, 0.0, 0.0], half_size: 1.0, opacity: None },
                PanelSpec { center: [2.2, 0.0, 0.0], half_size: 1.0, opacity: None },
            ]),
            image_width: 48,
            image_height: 48,
            seed: 21,
            ..SceneSpec::default()
        };
        let mut scene = generate_scene(&spec).unwrap();
        scene.gaussians.push(GaussianDisk {
            center: Vector3::new(0.0, 0.0, 0.0),
            tangent_u: Vector3::x(),
            tangent_v: Vector3::y(),
            scale_u: 2.4,
            scale_v: 0.6,
            opacity: 0.95,
            color: [0.8, 0.8, 0.8],
            feature: vec![],
            gt_instance: None,
        });
        let maps: Vec<LabelImage> = (0..scene.views.len())
            .map(|v| render_gt_instance_map(&scene, v, &RenderOptions::default()).unwrap())
            .collect();
        (scene, maps)
    }

    #[test]
    fn straddling_disk_is_split_until_it_commits() {
        let (scene, maps) = straddler_scene();
        let refs: Vec<&LabelImage> = maps.iter().collect();
        let config = RefineConfig::default();
        let straddler = scene.gaussians.len() - 1;

        let (matrix, _) = trace_all(&scene, &refs, &config.trace).unwrap();
        let before = ambiguity_scores(&matrix, &config, 0);
        assert!(before.ambiguous[straddler], "straddler must start ambiguous");

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let outcome = density_control_round(&scene, &refs, &config, &mut rng, 1).unwrap();
        assert_eq!(outcome.n_split as usize, before.n_ambiguous());
        assert_eq!(
            outcome.scene.gaussians.len(),
            scene.gaussians.len() + outcome.n_split as usize - outcome.n_pruned as usize,
            "count change must equal splits minus prunes"
        );
        assert!(outcome.after.n_ambiguous() <= outcome.before.n_ambiguous());
        assert!(matches!(outcome.fates[straddler], IndexFate::Split(_, _)));
        // Unsplit Gaussians keep their relative order.
        let mut last = None;
        for fate in &outcome.fates {
            if let IndexFate::Kept(Some(idx)) = fate {
                assert!(last.map_or(true, |l| l < *idx));
                last = Some(*idx);
            }
        }

        // Determinism: same seed reproduces the same scene.
        let mut rng2 = ChaCha12Rng::seed_from_u64(3);
        let outcome2 = density_control_round(&scene, &refs, &config, &mut rng2, 1).unwrap();
        assert_eq!(outcome.scene, outcome2.scene);
        assert_eq!(outcome.fates, outcome2.fates);
    }

    #[test]
    fn clean_scene_round_is_a_fixed_point() {
        let (mut scene, _) = straddler_scene();
        scene.gaussians.pop();
        let maps: Vec<LabelImage> = (0..scene.views.len())
            .map(|v| render_gt_instance_map(&scene, v, &RenderOptions::default()).unwrap())
            .collect();
        let refs: Vec<&LabelImage> = maps.iter().collect();
        let config = RefineConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let outcome = density_control_round(&scene, &refs, &config, &mut rng, 1).unwrap();
        assert_eq!(outcome.scene, scene);
        assert!(outcome.fates.is_empty());
        assert_eq!((outcome.n_split, outcome.n_pruned), (0, 0));
    }

    #[test]
    fn refit_on_own_render_is_a_no_op() {
        let (mut scene, _) = straddler_scene();
        scene.gaussians.pop();
        let config = RefineConfig::default();
        let targets: Vec<Vec<f64>> = (0..scene.views.len())
            .map(|v| render(&scene, v, &config.trace.render).unwrap().color)
            .collect();
        let before = scene.clone();
        let trace = refine_appearance(&mut scene, &targets, 5, 0.05, &config).unwrap();
        assert_eq!(scene, before);
        assert!(trace.losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn single_disk_color_descends_to_target() {
        let mut scene = Scene {
            gaussians: vec![GaussianDisk {
                center: Vector3::new(0.0, 0.0, 2.0),
                tangent_u: Vector3::x(),
                tangent_v: Vector3::y(),
                scale_u: 1.2,
                scale_v: 1.2,
                // Opacity 1.0 stays pinned at the projection bound, making
                // the red channel the only free parameter.
                opacity: 1.0,
                color: [0.1, 0.0, 0.0],
                feature: vec![],
                gt_instance: Some(1),
            }],
            views: vec![crate::scene::CameraView::look_at(
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.0, 0.0, 2.0),
                40.0,
                40.0,
                40,
                40,
            )],
            feature_dim: 0,
        };
        let mut target_scene = scene.clone();
        target_scene.gaussians[0].color = [0.9, 0.0, 0.0];
        let config = RefineConfig::default();
        let targets = vec![render(&target_scene, 0, &config.trace.render).unwrap().color];
        let trace = refine_appearance(&mut scene, &targets, 150, 2.0, &config).unwrap();
        for pair in trace.losses.windows(2) {
            assert!(pair[1] <= pair[0], "loss must never increase");
        }
        assert!(
            scene.gaussians[0].color[0] > 0.85,
            "red channel should approach the target, got {}",
            scene.gaussians[0].color[0]
        );
    }

    #[test]
    fn refinement_terminates_and_logs_rounds() {
        let (scene, maps) = straddler_scene();
        let refs: Vec<&LabelImage> = maps.iter().collect();
        let config = RefineConfig { round_period: 3, max_rounds: 4, ..RefineConfig::default() };
        let targets: Vec<Vec<f64>> = (0..scene.views.len())
            .map(|v| render(&scene, v, &config.trace.render).unwrap().color)
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let outcome = run_refinement(&scene, &refs, &targets, &config, &mut rng).unwrap();
        assert!(!outcome.rounds.is_empty());
        assert_eq!(outcome.reports.len(), outcome.rounds.len() + 1);
        let counts: Vec<usize> = outcome.reports.iter().map(AmbiguityReport::n_ambiguous).collect();
        for pair in counts.windows(2) {
            assert!(pair[1] <= pair[0], "ambiguity must not grow: {counts:?}");
        }
        if outcome.rounds.len() < config.max_rounds as usize {
            assert_eq!(*counts.last().unwrap(), 0, "early stop requires a clean scene");
        }

        let mut buf = Vec::new();
        write_refine_log(&mut buf, &outcome.rounds).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), outcome.rounds.len());
        assert!(text.lines().next().unwrap().contains("\"psnr\""));
    }

    #[test]
    fn zero_rounds_refits_appearance_only() {
        let (scene, maps) = straddler_scene();
        let refs: Vec<&LabelImage> = maps.iter().collect();
        let config = RefineConfig { max_rounds: 0, round_period: 2, ..RefineConfig::default() };
        let targets: Vec<Vec<f64>> = (0..scene.views.len())
            .map(|v| render(&scene, v, &config.trace.render).unwrap().color)
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let outcome = run_refinement(&scene, &refs, &targets, &config, &mut rng).unwrap();
        assert_eq!(outcome.scene.gaussians.len(), scene.gaussians.len());
        assert_eq!(outcome.rounds.len(), 1);
        assert_eq!(outcome.rounds[0].round, 0);
        assert!(outcome.reports[0].n_ambiguous() > 0, "straddler still present");
    }

    #[test]
    fn config_bounds_are_enforced() {
        let bad = RefineConfig { gamma: 1.0, ..RefineConfig::default() };
        assert!(matches!(bad.validate(), Err(RefineError::Config { .. })));
        let bad = RefineConfig { theta_as: 0.0, ..RefineConfig::default() };
        assert!(matches!(bad.validate(), Err(RefineError::Config { .. })));
        let bad = RefineConfig { scale_divisor: 1.0, ..RefineConfig::default() };
        assert!(matches!(bad.validate(), Err(RefineError::Config { .. })));
    }
}
