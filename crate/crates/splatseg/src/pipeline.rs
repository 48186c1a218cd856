//! End-to-end pipeline stages with on-disk artifacts and versioned reports.
//!
//! Every stage is a pure function of (artifacts on disk, config, seed): it
//! reads what earlier stages wrote under the run's output directory, writes
//! its own artifacts plus a `report_<stage>.json`, and can be re-run alone.
//! One global seed feeds a splitmix stream that hands each randomized stage
//! its own sub-seed. Reports hold only deterministic values so a repeated run
//! is byte-identical; wall-clock timings go to a `timings_<stage>.json`
//! sidecar that nothing downstream reads.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::formats::{read_pgm16_from_path, write_pgm16_to_path, write_ppm_to_path, FormatError};
use crate::instance::{
    inject_inconsistency, map_iou, masks_from_labels, overlap_masks, InjectorParams, InstanceError,
    InstanceMap, LabelImage, Mask,
};
use crate::lift::{
    extract_object, query_segment, subset_scene, train_contrastive, ContrastiveConfig, LiftError,
    MaskPrompter, QueryConfig, self_prompt,
};
use crate::math::splitmix64;
use crate::merge::{merge_patches, write_merge_log, MergeError, MergeOptions};
use crate::metrics::{mask_from_render, psnr_restricted, Decibels, MetricsError};
use crate::refine::{run_refinement, write_refine_log, RefineConfig, RefineError};
use crate::render::{render, render_gt_instance_map, RenderError};
use crate::scene::{
    generate_scene, load_scene_from_path, save_scene_to_path, Scene, SceneError, SceneSpec,
};
use crate::trace::{trace_all, TraceError, TraceOptions, WeightMatrix};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config: {reason}")]
    Config { reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("missing artifact {path} (run the producing stage first)")]
    MissingArtifact { path: PathBuf },
    #[error("report {path} has schema version {got}, this build reads {want}")]
    SchemaVersion { path: PathBuf, got: u32, want: u32 },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Where the scene comes from: generated fresh or loaded from a file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum SceneSource {
    /// Generate from a spec; the spec's seed is replaced by the derived stage seed.
    Spec(SceneSpec),
    /// Load an existing scene file verbatim.
    File(PathBuf),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SelfPromptParams {
    /// Views the prompter visits; None means half the ring (at least one).
    pub max_views: Option<usize>,
    /// Fraction of views whose oracle masks get boundary corruption.
    pub corrupt_fraction: f64,
}

impl Default for SelfPromptParams {
    fn default() -> Self {
        SelfPromptParams { max_views: None, corrupt_fraction: 0.25 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneSource,
    pub injector: InjectorParams,
    pub trace: TraceOptions,
    pub merge: MergeOptions,
    pub refine: RefineConfig,
    pub contrastive: ContrastiveConfig,
    pub query: QueryConfig,
    pub selfprompt: SelfPromptParams,
    /// View the query/self-prompt stages start from.
    pub reference_view: usize,
    pub out_dir: PathBuf,
    /// Global seed; every randomized stage gets a derived sub-seed.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSource::Spec(SceneSpec::default()),
            injector: InjectorParams::default(),
            trace: TraceOptions::default(),
            merge: MergeOptions::default(),
            refine: RefineConfig::default(),
            contrastive: ContrastiveConfig::default(),
            query: QueryConfig::default(),
            selfprompt: SelfPromptParams::default(),
            reference_view: 0,
            out_dir: PathBuf::from("run"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.refine.validate().map_err(|e| PipelineError::Config { reason: e.to_string() })?;
        if !(0.0..=1.0).contains(&self.merge.theta) {
            return Err(PipelineError::Config {
                reason: format!("merge theta {} outside [0, 1]", self.merge.theta),
            });
        }
        if !(0.0..=1.0).contains(&self.selfprompt.corrupt_fraction) {
            return Err(PipelineError::Config {
                reason: format!("corrupt_fraction {} outside [0, 1]", self.selfprompt.corrupt_fraction),
            });
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, PipelineError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| PipelineError::Io { path: path.into(), source })?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|source| PipelineError::Json { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Output directory precedence: CLI flag, then the SPLATSEG_OUT_DIR
/// environment value (passed in by the caller), then the config.
pub fn resolve_out_dir(flag: Option<PathBuf>, env: Option<String>, config: &Path) -> PathBuf {
    flag.or_else(|| env.map(PathBuf::from)).unwrap_or_else(|| config.to_path_buf())
}

/// Per-stage sub-seeds derived from the global seed (splitmix stream).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSeeds {
    pub scene: u64,
    pub inject: u64,
    pub refine: u64,
    pub lift: u64,
    pub selfprompt: u64,
}

pub fn derive_stage_seeds(seed: u64) -> StageSeeds {
    let mut state = seed;
    StageSeeds {
        scene: splitmix64(&mut state),
        inject: splitmix64(&mut state),
        refine: splitmix64(&mut state),
        lift: splitmix64(&mut state),
        selfprompt: splitmix64(&mut state),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageReport {
    pub schema_version: u32,
    pub stage: String,
    /// Deterministic stage metrics; keys are sorted on serialization.
    pub metrics: BTreeMap<String, Value>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|source| PipelineError::Json { path: path.into(), source })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact { path: path.into() });
    }
    let bytes = fs::read(path).map_err(|source| PipelineError::Io { path: path.into(), source })?;
    serde_json::from_slice(&bytes).map_err(|source| PipelineError::Json { path: path.into(), source })
}

fn report_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("report_{stage}.json"))
}

/// Loads a stage report, rejecting unknown schema versions.
pub fn load_report(dir: &Path, stage: &str) -> Result<StageReport, PipelineError> {
    let path = report_path(dir, stage);
    let report: StageReport = read_json(&path)?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(PipelineError::SchemaVersion {
            path,
            got: report.schema_version,
            want: REPORT_SCHEMA_VERSION,
        });
    }
    Ok(report)
}

fn finish_stage(
    dir: &Path,
    stage: &str,
    metrics: BTreeMap<String, Value>,
    timings: BTreeMap<String, f64>,
) -> Result<StageReport, PipelineError> {
    let report =
        StageReport { schema_version: REPORT_SCHEMA_VERSION, stage: stage.to_string(), metrics };
    write_json(&report_path(dir, stage), &report)?;
    write_json(
        &dir.join(format!("timings_{stage}.json")),
        &json!({ "schema_version": REPORT_SCHEMA_VERSION, "stage": stage, "seconds": timings }),
    )?;
    Ok(report)
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.into(), source })
}

// Artifact naming, one place.
fn scene_path(d: &Path) -> PathBuf { d.join("scene.json") }
fn refined_scene_path(d: &Path) -> PathBuf { d.join("scene_refined.json") }
fn lifted_scene_path(d: &Path) -> PathBuf { d.join("scene_lifted.json") }
fn view_ppm(d: &Path, v: usize) -> PathBuf { d.join(format!("view_{v:03}.ppm")) }
fn map_pgm(d: &Path, family: &str, v: usize) -> PathBuf { d.join(format!("{family}_{v:03}.pgm")) }
fn maps_manifest_path(d: &Path, family: &str) -> PathBuf { d.join(format!("{family}_manifest.json")) }
fn weights_path(d: &Path) -> PathBuf { d.join("weights.swmx") }
fn object_mask_pgm(d: &Path, family: &str, object: u32, v: usize) -> PathBuf {
    d.join(format!("{family}_{object}_{v:03}.pgm"))
}
fn object_manifest_path(d: &Path, family: &str, object: u32) -> PathBuf {
    d.join(format!("{family}_{object}.json"))
}

/// Sidecar for a family of label maps: per-view label counts plus, for patch
/// maps, the covering-mask signatures and hierarchy edges merge needs.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
struct MapsManifest {
    schema_version: u32,
    num_labels: Vec<u32>,
    #[serde(default)]
    signatures: Vec<Vec<u64>>,
    #[serde(default)]
    hierarchy: Vec<Vec<(u32, u32)>>,
}

fn save_maps(
    dir: &Path,
    family: &str,
    maps: &[LabelImage],
    signatures: Option<&[Vec<u64>]>,
    hierarchy: Option<&[Vec<(u32, u32)>]>,
) -> Result<(), PipelineError> {
    for (v, map) in maps.iter().enumerate() {
        write_pgm16_to_path(map_pgm(dir, family, v), map.width, map.height, &map.ids)?;
    }
    let manifest = MapsManifest {
        schema_version: REPORT_SCHEMA_VERSION,
        num_labels: maps.iter().map(|m| m.num_labels).collect(),
        signatures: signatures.map(<[Vec<u64>]>::to_vec).unwrap_or_default(),
        hierarchy: hierarchy.map(<[Vec<(u32, u32)>]>::to_vec).unwrap_or_default(),
    };
    write_json(&maps_manifest_path(dir, family), &manifest)
}

fn load_maps(dir: &Path, family: &str) -> Result<(Vec<LabelImage>, MapsManifest), PipelineError> {
    let manifest: MapsManifest = read_json(&maps_manifest_path(dir, family))?;
    let mut maps = Vec::with_capacity(manifest.num_labels.len());
    for (v, &num_labels) in manifest.num_labels.iter().enumerate() {
        let path = map_pgm(dir, family, v);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact { path });
        }
        let (width, height, ids) = read_pgm16_from_path(&path)?;
        maps.push(LabelImage { width, height, ids, num_labels });
    }
    Ok((maps, manifest))
}

/// Rebuilds the patch maps merge consumes from the label images plus the
/// manifest's signatures.
fn instance_maps_from(maps: Vec<LabelImage>, manifest: &MapsManifest) -> Vec<InstanceMap> {
    maps.into_iter()
        .zip(&manifest.signatures)
        .map(|(labels, signatures)| {
            let mut pixel_counts = vec![0u32; labels.num_labels as usize];
            for &id in &labels.ids {
                pixel_counts[id as usize] += 1;
            }
            InstanceMap { labels, pixel_counts, signatures: signatures.clone() }
        })
        .collect()
}

fn load_scene_artifact(path: &Path) -> Result<Scene, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact { path: path.into() });
    }
    Ok(load_scene_from_path(path)?)
}

fn save_mask_pgm(path: &Path, mask: &Mask) -> Result<(), PipelineError> {
    let ids: Vec<u32> = mask.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect();
    Ok(write_pgm16_to_path(path, mask.width, mask.height, &ids)?)
}

/// Ground-truth instance ids present anywhere in a map family, ascending.
fn object_ids(maps: &[LabelImage]) -> Vec<u32> {
    let mut ids: Vec<u32> = maps.iter().flat_map(|m| m.present_ids()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

pub fn stage_generate(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let scene = match &cfg.scene {
        SceneSource::Spec(spec) => {
            let mut spec = spec.clone();
            spec.seed = derive_stage_seeds(cfg.seed).scene;
            generate_scene(&spec)?
        }
        SceneSource::File(path) => load_scene_artifact(path)?,
    };
    save_scene_to_path(&scene, scene_path(&cfg.out_dir))?;
    let mut metrics = BTreeMap::new();
    metrics.insert("n_gaussians".into(), json!(scene.gaussians.len()));
    metrics.insert("n_views".into(), json!(scene.views.len()));
    metrics.insert("feature_dim".into(), json!(scene.feature_dim));
    metrics.insert("max_instance_id".into(), json!(scene.max_instance_id()));
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "generate", metrics, timings)
}

pub fn stage_render(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let scene = load_scene_artifact(&scene_path(&cfg.out_dir))?;
    let mut fragments = 0u64;
    let mut residual_means = Vec::with_capacity(scene.views.len());
    for v in 0..scene.views.len() {
        let out = render(&scene, v, &cfg.trace.render)?;
        fragments += out.fragments;
        residual_means
            .push(out.transmittance.iter().sum::<f64>() / out.transmittance.len() as f64);
        write_ppm_to_path(view_ppm(&cfg.out_dir, v), out.width, out.height, &out.color)?;
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("n_views".into(), json!(scene.views.len()));
    metrics.insert("fragments".into(), json!(fragments));
    metrics.insert("mean_residual_transmittance".into(), json!(residual_means));
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "render", metrics, timings)
}

pub fn stage_gtmaps(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let scene = load_scene_artifact(&scene_path(&cfg.out_dir))?;
    let maps: Vec<LabelImage> = (0..scene.views.len())
        .map(|v| render_gt_instance_map(&scene, v, &cfg.trace.render))
        .collect::<Result<_, _>>()?;
    save_maps(&cfg.out_dir, "gt", &maps, None, None)?;
    let labeled: Vec<f64> = maps
        .iter()
        .map(|m| m.ids.iter().filter(|&&id| id != 0).count() as f64 / m.ids.len() as f64)
        .collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("n_views".into(), json!(maps.len()));
    metrics.insert("num_labels".into(), json!(maps.first().map(|m| m.num_labels).unwrap_or(0)));
    metrics.insert("labeled_fraction".into(), json!(labeled));
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "gtmaps", metrics, timings)
}

pub fn stage_inject(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let (gt_maps, _) = load_maps(&cfg.out_dir, "gt")?;
    let per_view: Vec<Vec<(u32, Mask)>> = gt_maps.iter().map(masks_from_labels).collect();
    let mut params = cfg.injector.clone();
    params.seed = derive_stage_seeds(cfg.seed).inject;
    let sets = inject_inconsistency(&per_view, &params)?;
    let instance_maps: Vec<InstanceMap> =
        sets.iter().map(overlap_masks).collect::<Result<_, _>>()?;

    let labels: Vec<LabelImage> = instance_maps.iter().map(|m| m.labels.clone()).collect();
    let signatures: Vec<Vec<u64>> = instance_maps.iter().map(|m| m.signatures.clone()).collect();
    let hierarchy: Vec<Vec<(u32, u32)>> = sets.iter().map(|s| s.hierarchy.clone()).collect();
    save_maps(&cfg.out_dir, "inj", &labels, Some(&signatures), Some(&hierarchy))?;

    let mut metrics = BTreeMap::new();
    metrics.insert("n_views".into(), json!(labels.len()));
    metrics.insert(
        "masks_per_view".into(),
        json!(sets.iter().map(|s| s.masks.len()).collect::<Vec<_>>()),
    );
    metrics.insert(
        "patches_per_view".into(),
        json!(instance_maps.iter().map(|m| m.patch_count()).collect::<Vec<_>>()),
    );
    metrics.insert(
        "hierarchy_edges".into(),
        json!(hierarchy.iter().map(Vec::len).sum::<usize>()),
    );
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "inject", metrics, timings)
}

pub fn stage_trace(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let scene = load_scene_artifact(&scene_path(&cfg.out_dir))?;
    let (maps, _) = load_maps(&cfg.out_dir, "inj")?;
    let refs: Vec<&LabelImage> = maps.iter().collect();
    let (matrix, stats) = trace_all(&scene, &refs, &cfg.trace)?;
    matrix.save_swmx_to_path(weights_path(&cfg.out_dir))?;

    let n = matrix.n_gaussians();
    let mut visible = Vec::with_capacity(n);
    for i in 0..n {
        visible.push(matrix.visible_views(i)?.len());
    }
    let background: f64 = stats.iter().flat_map(|s| &s.background_mass).sum();
    let mut metrics = BTreeMap::new();
    metrics.insert("n_gaussians".into(), json!(n));
    metrics.insert("n_views".into(), json!(matrix.n_views()));
    metrics.insert("fragments".into(), json!(stats.iter().map(|s| s.fragments).sum::<u64>()));
    metrics.insert("background_mass_total".into(), json!(background));
    metrics.insert(
        "mean_visible_views".into(),
        json!(visible.iter().sum::<usize>() as f64 / n.max(1) as f64),
    );
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "trace", metrics, timings)
}

pub fn stage_merge(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let matrix = WeightMatrix::load_swmx_from_path(weights_path(&cfg.out_dir))?;
    let (labels, manifest) = load_maps(&cfg.out_dir, "inj")?;
    let instance_maps = instance_maps_from(labels, &manifest);
    let result = merge_patches(&matrix, &instance_maps, Some(&manifest.hierarchy), &cfg.merge)?;

    save_maps(&cfg.out_dir, "merged", &result.relabeled, None, None)?;
    let log_path = cfg.out_dir.join("merge_log.jsonl");
    let file = fs::File::create(&log_path)
        .map_err(|source| PipelineError::Io { path: log_path.clone(), source })?;
    write_merge_log(file, &result.log)
        .map_err(|source| PipelineError::Io { path: log_path, source })?;

    let merged_pairs = result.log.iter().filter(|p| p.merged).count();
    let mut metrics = BTreeMap::new();
    metrics.insert("n_global".into(), json!(result.n_global));
    metrics.insert("pairs_scored".into(), json!(result.log.len()));
    metrics.insert("pairs_merged".into(), json!(merged_pairs));
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "merge", metrics, timings)
}

pub fn stage_refine(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let scene = load_scene_artifact(&scene_path(&cfg.out_dir))?;
    let (maps, _) = load_maps(&cfg.out_dir, "merged")?;
    let refs: Vec<&LabelImage> = maps.iter().collect();
    let targets: Vec<Vec<f64>> = (0..scene.views.len())
        .map(|v| render(&scene, v, &cfg.refine.trace.render).map(|o| o.color))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_stage_seeds(cfg.seed).refine);
    let outcome = run_refinement(&scene, &refs, &targets, &cfg.refine, &mut rng)?;

    save_scene_to_path(&outcome.scene, refined_scene_path(&cfg.out_dir))?;
    let log_path = cfg.out_dir.join("refine_log.jsonl");
    let file = fs::File::create(&log_path)
        .map_err(|source| PipelineError::Io { path: log_path.clone(), source })?;
    write_refine_log(file, &outcome.rounds)
        .map_err(|source| PipelineError::Io { path: log_path, source })?;

    let mut metrics = BTreeMap::new();
    metrics.insert("rounds".into(), json!(outcome.rounds.len()));
    metrics.insert("n_gaussians_before".into(), json!(scene.gaussians.len()));
    metrics.insert("n_gaussians_after".into(), json!(outcome.scene.gaussians.len()));
    metrics.insert(
        "ambiguous_initial".into(),
        json!(outcome.reports.first().map(|r| r.n_ambiguous()).unwrap_or(0)),
    );
    metrics.insert(
        "ambiguous_final".into(),
        json!(outcome.reports.last().map(|r| r.n_ambiguous()).unwrap_or(0)),
    );
    metrics.insert(
        "ambiguous_per_round".into(),
        json!(outcome.rounds.iter().map(|r| r.n_ambiguous).collect::<Vec<_>>()),
    );
    metrics.insert(
        "psnr_per_round".into(),
        json!(outcome.rounds.iter().map(|r| r.psnr).collect::<Vec<_>>()),
    );
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "refine", metrics, timings)
}

pub fn stage_lift(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let scene = load_scene_artifact(&refined_scene_path(&cfg.out_dir))?;
    let (maps, _) = load_maps(&cfg.out_dir, "merged")?;
    let refs: Vec<&LabelImage> = maps.iter().collect();
    let mut config = cfg.contrastive;
    config.seed = derive_stage_seeds(cfg.seed).lift;
    config.feature_dim = scene.feature_dim;
    let (lifted, losses) = train_contrastive(&scene, &refs, &config)?;
    save_scene_to_path(&lifted, lifted_scene_path(&cfg.out_dir))?;

    let mut metrics = BTreeMap::new();
    metrics.insert("steps".into(), json!(losses.len()));
    metrics.insert("loss_first".into(), json!(losses.first().copied()));
    metrics.insert("loss_last".into(), json!(losses.last().copied()));
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "lift", metrics, timings)
}

/// Per-object output of the query-segmentation stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentManifest {
    pub schema_version: u32,
    pub object: u32,
    pub reference_view: usize,
    pub query_points: Vec<(u32, u32)>,
    pub threshold: f64,
    /// IoU of the predicted mask against the GT object mask, per view.
    pub per_view_iou: Vec<f64>,
    /// Mean IoU over all views except the reference.
    pub held_out_miou: f64,
    pub n_selected_gaussians: usize,
    pub selected: Vec<u32>,
}

pub fn stage_segment(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let scene = load_scene_artifact(&lifted_scene_path(&cfg.out_dir))?;
    let (gt_maps, _) = load_maps(&cfg.out_dir, "gt")?;
    let objects = object_ids(&gt_maps);

    let mut per_object = BTreeMap::new();
    for &k in &objects {
        let reference = Mask::from_label(&gt_maps[cfg.reference_view], k);
        let result = query_segment(&scene, cfg.reference_view, &reference, &cfg.query)?;
        let per_view_iou: Vec<f64> = (0..scene.views.len())
            .map(|v| result.masks[v].iou(&Mask::from_label(&gt_maps[v], k)))
            .collect();
        let held_out: Vec<f64> = per_view_iou
            .iter()
            .enumerate()
            .filter(|&(v, _)| v != cfg.reference_view)
            .map(|(_, &iou)| iou)
            .collect();
        let held_out_miou = held_out.iter().sum::<f64>() / held_out.len().max(1) as f64;
        for (v, mask) in result.masks.iter().enumerate() {
            save_mask_pgm(&object_mask_pgm(&cfg.out_dir, "pred", k, v), mask)?;
        }
        let manifest = SegmentManifest {
            schema_version: REPORT_SCHEMA_VERSION,
            object: k,
            reference_view: cfg.reference_view,
            query_points: result.query_points,
            threshold: result.threshold.unwrap_or(f64::INFINITY),
            per_view_iou,
            held_out_miou,
            n_selected_gaussians: result.selected.len(),
            selected: result.selected,
        };
        write_json(&object_manifest_path(&cfg.out_dir, "segment", k), &manifest)?;
        per_object.insert(format!("object_{k}"), json!(held_out_miou));
    }

    let mean = per_object.values().filter_map(Value::as_f64).sum::<f64>()
        / per_object.len().max(1) as f64;
    let mut metrics = BTreeMap::new();
    metrics.insert("objects".into(), json!(objects));
    metrics.insert("held_out_miou_per_object".into(), json!(per_object));
    metrics.insert("held_out_miou_mean".into(), json!(mean));
    metrics.insert("reference_view".into(), json!(cfg.reference_view));
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "segment", metrics, timings)
}

/// Per-object output of the extraction stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractionManifest {
    pub schema_version: u32,
    pub object: u32,
    pub selected: Vec<u32>,
    pub n_selected: usize,
    /// Fraction of the object's gt-labeled Gaussians that were selected.
    pub recall: f64,
    /// Fraction of the selection labeled as a different object (unlabeled
    /// Gaussians, e.g. split children, count toward neither).
    pub contamination: f64,
    /// IoU of the rendered-subset mask against the GT mask, per view.
    pub mask_iou_per_view: Vec<f64>,
    pub mask_iou_mean: f64,
    /// Restricted-region PSNR of the subset render against the full render,
    /// views with an empty GT mask skipped.
    pub psnr_restricted_per_view: Vec<Decibels>,
    /// Mean over views with finite PSNR; +inf when every view matched exactly.
    pub psnr_restricted_mean: Decibels,
}

pub fn stage_extract(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let scene = load_scene_artifact(&lifted_scene_path(&cfg.out_dir))?;
    let (gt_maps, _) = load_maps(&cfg.out_dir, "gt")?;
    let objects = object_ids(&gt_maps);
    let l = scene.views.len();
    let full_renders: Vec<Vec<f64>> = (0..l)
        .map(|v| render(&scene, v, &cfg.trace.render).map(|o| o.color))
        .collect::<Result<_, _>>()?;

    let mut recalls = BTreeMap::new();
    let mut contaminations = BTreeMap::new();
    let mut mask_ious = BTreeMap::new();
    for &k in &objects {
        let masks: Vec<Mask> = (0..l).map(|v| Mask::from_label(&gt_maps[v], k)).collect();
        let extraction = extract_object(&scene, &masks, &cfg.trace)?;

        let gt_total = scene.gaussians.iter().filter(|g| g.gt_instance == Some(k)).count();
        let hits = extraction
            .selected
            .iter()
            .filter(|&&i| scene.gaussians[i as usize].gt_instance == Some(k))
            .count();
        let foreign = extraction
            .selected
            .iter()
            .filter(|&&i| {
                matches!(scene.gaussians[i as usize].gt_instance, Some(id) if id != k)
            })
            .count();
        let recall = hits as f64 / gt_total.max(1) as f64;
        let contamination = foreign as f64 / extraction.selected.len().max(1) as f64;

        let subset = subset_scene(&scene, &extraction.selected);
        let mut iou_per_view = Vec::with_capacity(l);
        let mut psnr_per_view = Vec::new();
        for v in 0..l {
            let out = render(&subset, v, &cfg.trace.render)?;
            let rendered_mask = mask_from_render(&out.color, out.width, out.height)?;
            save_mask_pgm(&object_mask_pgm(&cfg.out_dir, "ext", k, v), &rendered_mask)?;
            iou_per_view.push(rendered_mask.iou(&masks[v]));
            if !masks[v].is_empty() {
                psnr_per_view.push(psnr_restricted(&out.color, &full_renders[v], &masks[v])?);
            }
        }
        let iou_mean = iou_per_view.iter().sum::<f64>() / iou_per_view.len().max(1) as f64;
        let finite: Vec<f64> =
            psnr_per_view.iter().map(|p| p.0).filter(|p| p.is_finite()).collect();
        let psnr_mean = if finite.is_empty() {
            Decibels(f64::INFINITY)
        } else {
            Decibels(finite.iter().sum::<f64>() / finite.len() as f64)
        };

        let manifest = ExtractionManifest {
            schema_version: REPORT_SCHEMA_VERSION,
            object: k,
            n_selected: extraction.selected.len(),
            selected: extraction.selected,
            recall,
            contamination,
            mask_iou_per_view: iou_per_view,
            mask_iou_mean: iou_mean,
            psnr_restricted_per_view: psnr_per_view,
            psnr_restricted_mean: psnr_mean,
        };
        write_json(&object_manifest_path(&cfg.out_dir, "extraction", k), &manifest)?;
        recalls.insert(format!("object_{k}"), json!(recall));
        contaminations.insert(format!("object_{k}"), json!(contamination));
        mask_ious.insert(format!("object_{k}"), json!(iou_mean));
    }

    let mut metrics = BTreeMap::new();
    metrics.insert("objects".into(), json!(objects));
    metrics.insert("recall_per_object".into(), json!(recalls));
    metrics.insert("contamination_per_object".into(), json!(contaminations));
    metrics.insert("mask_iou_per_object".into(), json!(mask_ious));
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "extract", metrics, timings)
}

/// Per-object output of the self-prompting stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfPromptManifest {
    pub schema_version: u32,
    pub object: u32,
    pub reference_view: usize,
    pub visited: Vec<usize>,
    /// Views whose oracle masks received boundary corruption.
    pub corrupted: Vec<usize>,
    pub selected: Vec<u32>,
    pub n_selected: usize,
    pub held_out_views: Vec<usize>,
    /// IoU of the rendered held-out masks against the GT masks.
    pub held_out_iou: Vec<f64>,
    pub held_out_miou: f64,
}

pub fn stage_selfprompt(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let scene = load_scene_artifact(&lifted_scene_path(&cfg.out_dir))?;
    let (gt_maps, _) = load_maps(&cfg.out_dir, "gt")?;
    let objects = object_ids(&gt_maps);
    let l = scene.views.len();
    let max_views = cfg.selfprompt.max_views.unwrap_or_else(|| (l / 2).max(1)).clamp(1, l);
    let visit: Vec<usize> = (0..max_views).map(|k| (cfg.reference_view + k) % l).collect();
    let noise_radius = cfg.injector.noise_radius.max(1);

    let mut rng = ChaCha12Rng::seed_from_u64(derive_stage_seeds(cfg.seed).selfprompt);
    let n_corrupt = ((l as f64) * cfg.selfprompt.corrupt_fraction).round() as usize;
    let mut per_object = BTreeMap::new();
    for &k in &objects {
        let mut masks: Vec<Mask> = (0..l).map(|v| Mask::from_label(&gt_maps[v], k)).collect();
        let mut corrupted =
            rand::seq::index::sample(&mut rng, l, n_corrupt.min(l)).into_vec();
        corrupted.sort_unstable();
        for &v in &corrupted {
            masks[v] = if rand::Rng::gen_bool(&mut rng, 0.5) {
                masks[v].dilate(noise_radius)
            } else {
                masks[v].erode(noise_radius)
            };
        }

        let seed_point = masks[cfg.reference_view]
            .centroid()
            .map(|(x, y)| (x.round() as u32, y.round() as u32))
            .unwrap_or((gt_maps[0].width / 2, gt_maps[0].height / 2));
        let mut prompter = MaskPrompter { masks };
        let result = self_prompt(
            &scene,
            cfg.reference_view,
            &[seed_point],
            &mut prompter,
            max_views,
            &cfg.trace,
        )?;

        for (v, mask) in result.masks.iter().enumerate() {
            save_mask_pgm(&object_mask_pgm(&cfg.out_dir, "sp", k, v), mask)?;
        }
        let held_out_views: Vec<usize> = (0..l).filter(|v| !visit.contains(v)).collect();
        let held_out_iou: Vec<f64> = held_out_views
            .iter()
            .map(|&v| result.masks[v].iou(&Mask::from_label(&gt_maps[v], k)))
            .collect();
        let held_out_miou =
            held_out_iou.iter().sum::<f64>() / held_out_iou.len().max(1) as f64;

        let manifest = SelfPromptManifest {
            schema_version: REPORT_SCHEMA_VERSION,
            object: k,
            reference_view: cfg.reference_view,
            visited: visit.clone(),
            corrupted,
            n_selected: result.selected.len(),
            selected: result.selected,
            held_out_views,
            held_out_iou,
            held_out_miou,
        };
        write_json(&object_manifest_path(&cfg.out_dir, "selfprompt", k), &manifest)?;
        per_object.insert(format!("object_{k}"), json!(held_out_miou));
    }

    let mean = per_object.values().filter_map(Value::as_f64).sum::<f64>()
        / per_object.len().max(1) as f64;
    let mut metrics = BTreeMap::new();
    metrics.insert("objects".into(), json!(objects));
    metrics.insert("visited".into(), json!(visit));
    metrics.insert("held_out_miou_per_object".into(), json!(per_object));
    metrics.insert("held_out_miou_mean".into(), json!(mean));
    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "selfprompt", metrics, timings)
}

pub fn stage_eval(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    ensure_dir(&cfg.out_dir)?;
    let t0 = Instant::now();
    let (gt_maps, _) = load_maps(&cfg.out_dir, "gt")?;
    let (inj_maps, _) = load_maps(&cfg.out_dir, "inj")?;
    let (merged_maps, _) = load_maps(&cfg.out_dir, "merged")?;
    let objects = object_ids(&gt_maps);

    let mut pre_iou = Vec::with_capacity(gt_maps.len());
    let mut post_iou = Vec::with_capacity(gt_maps.len());
    let mut post_acc = Vec::with_capacity(gt_maps.len());
    for v in 0..gt_maps.len() {
        pre_iou.push(map_iou(&gt_maps[v], &inj_maps[v])?.mean_iou);
        let post = map_iou(&gt_maps[v], &merged_maps[v])?;
        post_iou.push(post.mean_iou);
        post_acc.push(post.mean_acc);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let min = |xs: &[f64]| xs.iter().copied().fold(f64::INFINITY, f64::min);

    let mut metrics = BTreeMap::new();
    metrics.insert("miou_pre_per_view".into(), json!(pre_iou));
    metrics.insert("miou_pre_mean".into(), json!(mean(&pre_iou)));
    metrics.insert("miou_pre_min".into(), json!(min(&pre_iou)));
    metrics.insert("miou_post_per_view".into(), json!(post_iou));
    metrics.insert("miou_post_mean".into(), json!(mean(&post_iou)));
    metrics.insert("miou_post_min".into(), json!(min(&post_iou)));
    metrics.insert("macc_post_mean".into(), json!(mean(&post_acc)));

    // Stage manifests that may or may not have been produced yet.
    let refine_report = load_report(&cfg.out_dir, "refine").ok();
    if let Some(r) = refine_report {
        if let Some(v) = r.metrics.get("ambiguous_per_round") {
            metrics.insert("refine_ambiguous_per_round".into(), v.clone());
        }
        if let Some(v) = r.metrics.get("psnr_per_round") {
            metrics.insert("refine_psnr_per_round".into(), v.clone());
        }
    }

    let mut segment_mious = Vec::new();
    let mut extract_recalls = Vec::new();
    let mut extract_contaminations = Vec::new();
    let mut extract_mask_ious = Vec::new();
    let mut extract_psnrs = Vec::new();
    let mut selfprompt_mious = Vec::new();
    for &k in &objects {
        if let Ok(m) = read_json::<SegmentManifest>(&object_manifest_path(&cfg.out_dir, "segment", k)) {
            segment_mious.push(m.held_out_miou);
        }
        if let Ok(m) =
            read_json::<ExtractionManifest>(&object_manifest_path(&cfg.out_dir, "extraction", k))
        {
            extract_recalls.push(m.recall);
            extract_contaminations.push(m.contamination);
            extract_mask_ious.push(m.mask_iou_mean);
            if m.psnr_restricted_mean.0.is_finite() {
                extract_psnrs.push(m.psnr_restricted_mean.0);
            }
        }
        if let Ok(m) =
            read_json::<SelfPromptManifest>(&object_manifest_path(&cfg.out_dir, "selfprompt", k))
        {
            selfprompt_mious.push(m.held_out_miou);
        }
    }
    if !segment_mious.is_empty() {
        metrics.insert("segment_held_out_miou_mean".into(), json!(mean(&segment_mious)));
        metrics.insert("segment_held_out_miou_min".into(), json!(min(&segment_mious)));
    }
    if !extract_recalls.is_empty() {
        metrics.insert("extract_recall_min".into(), json!(min(&extract_recalls)));
        metrics.insert(
            "extract_contamination_max".into(),
            json!(extract_contaminations.iter().copied().fold(0.0, f64::max)),
        );
        metrics.insert("extract_mask_iou_mean".into(), json!(mean(&extract_mask_ious)));
        if !extract_psnrs.is_empty() {
            metrics.insert("extract_psnr_restricted_mean".into(), json!(mean(&extract_psnrs)));
        }
    }
    if !selfprompt_mious.is_empty() {
        metrics.insert("selfprompt_held_out_miou_mean".into(), json!(mean(&selfprompt_mious)));
        if !segment_mious.is_empty() {
            metrics.insert(
                "selfprompt_vs_segment_delta".into(),
                json!(mean(&selfprompt_mious) - mean(&segment_mious)),
            );
        }
    }

    let timings = BTreeMap::from([("total".to_string(), t0.elapsed().as_secs_f64())]);
    finish_stage(&cfg.out_dir, "eval", metrics, timings)
}

pub const PIPELINE_STAGES: [&str; 12] = [
    "generate", "render", "gtmaps", "inject", "trace", "merge", "refine", "lift", "segment",
    "extract", "selfprompt", "eval",
];

/// Runs a single stage by name.
pub fn run_stage(cfg: &RunConfig, stage: &str) -> Result<StageReport, PipelineError> {
    match stage {
        "generate" => stage_generate(cfg),
        "render" => stage_render(cfg),
        "gtmaps" => stage_gtmaps(cfg),
        "inject" => stage_inject(cfg),
        "trace" => stage_trace(cfg),
        "merge" => stage_merge(cfg),
        "refine" => stage_refine(cfg),
        "lift" => stage_lift(cfg),
        "segment" => stage_segment(cfg),
        "extract" => stage_extract(cfg),
        "selfprompt" => stage_selfprompt(cfg),
        "eval" => stage_eval(cfg),
        other => Err(PipelineError::Config { reason: format!("unknown stage '{other}'") }),
    }
}

/// Runs every stage in order and writes a roll-up pipeline report.
pub fn run_pipeline(cfg: &RunConfig) -> Result<StageReport, PipelineError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut timings = BTreeMap::new();
    for stage in PIPELINE_STAGES {
        let s0 = Instant::now();
        run_stage(cfg, stage)?;
        timings.insert(stage.to_string(), s0.elapsed().as_secs_f64());
    }
    let eval = load_report(&cfg.out_dir, "eval")?;
    let mut metrics = BTreeMap::new();
    metrics.insert("stages".into(), json!(PIPELINE_STAGES));
    metrics.insert("seed".into(), json!(cfg.seed));
    for key in [
        "miou_pre_mean",
        "miou_post_min",
        "segment_held_out_miou_mean",
        "extract_recall_min",
        "selfprompt_held_out_miou_mean",
    ] {
        if let Some(v) = eval.metrics.get(key) {
            metrics.insert(key.into(), v.clone());
        }
    }
    timings.insert("total".to_string(), t0.elapsed().as_secs_f64());
    finish_stage(&cfg.out_dir, "pipeline", metrics, timings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{ForcedMerge, ForcedSplit};
    use crate::scene::PanelSpec;

    fn mini_config(dir: &Path) -> RunConfig {
        RunConfig {
            scene: SceneSource::Spec(SceneSpec {
                objects: 2,
                disks_per_side: 3,
                panel_layout: Some(vec![
                    PanelSpec { center: [-2.2, 0.0, 0.0], half_size: 1.0, opacity: None },
                    PanelSpec { center: [2.2, 0.0, 0.0], half_size: 1.0, opacity: None },
                ]),
                image_width: 32,
                image_height: 32,
                feature_dim: 4,
                ..SceneSpec::default()
            }),
            injector: InjectorParams {
                noise_radius: 1,
                forced_splits: vec![ForcedSplit { view: 1, instance: 1 }],
                forced_merges: vec![ForcedMerge { view: 3, instance_a: 1, instance_b: 2 }],
                ..InjectorParams::default()
            },
            refine: RefineConfig { round_period: 4, max_rounds: 1, ..RefineConfig::default() },
            contrastive: ContrastiveConfig {
                feature_dim: 4,
                steps: 6,
                pixels_per_step: 12,
                lr: 1e-3,
                tau: 1.0,
                ..ContrastiveConfig::default()
            },
            query: QueryConfig { tau: 1.0, max_points: 3, ..QueryConfig::default() },
            out_dir: dir.to_path_buf(),
            seed: 11,
            ..RunConfig::default()
        }
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let a = derive_stage_seeds(42);
        let b = derive_stage_seeds(42);
        assert_eq!(a, b);
        let all = [a.scene, a.inject, a.refine, a.lift, a.selfprompt];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_ne!(derive_stage_seeds(43).scene, a.scene);
    }

    #[test]
    fn out_dir_precedence_is_flag_env_config() {
        let cfg = Path::new("from_config");
        assert_eq!(
            resolve_out_dir(Some("flag".into()), Some("env".into()), cfg),
            PathBuf::from("flag")
        );
        assert_eq!(resolve_out_dir(None, Some("env".into()), cfg), PathBuf::from("env"));
        assert_eq!(resolve_out_dir(None, None, cfg), PathBuf::from("from_config"));
    }

    #[test]
    fn full_pipeline_writes_every_artifact_and_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let dir_a = tmp.path().join("a");
        let dir_b = tmp.path().join("b");
        run_pipeline(&mini_config(&dir_a)).unwrap();
        run_pipeline(&mini_config(&dir_b)).unwrap();

        for name in [
            "scene.json",
            "scene_refined.json",
            "scene_lifted.json",
            "weights.swmx",
            "merge_log.jsonl",
            "refine_log.jsonl",
            "gt_manifest.json",
            "inj_manifest.json",
            "merged_manifest.json",
        ] {
            assert!(dir_a.join(name).exists(), "{name} missing");
        }
        for stage in PIPELINE_STAGES.iter().chain(std::iter::once(&"pipeline")) {
            let report = load_report(&dir_a, stage).unwrap();
            assert_eq!(report.stage, *stage);
        }

        // Identical seeds give byte-identical reports and scene artifacts.
        for name in [
            "scene.json",
            "scene_refined.json",
            "scene_lifted.json",
            "weights.swmx",
            "report_pipeline.json",
            "report_eval.json",
            "report_merge.json",
            "report_segment.json",
            "report_selfprompt.json",
        ] {
            let a = fs::read(dir_a.join(name)).unwrap();
            let b = fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn stages_rerun_from_artifacts_reproduce_their_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = mini_config(tmp.path());
        run_pipeline(&cfg).unwrap();
        let before = fs::read(cfg.out_dir.join("report_merge.json")).unwrap();
        let merged_before = fs::read(map_pgm(&cfg.out_dir, "merged", 0)).unwrap();

        fs::remove_file(map_pgm(&cfg.out_dir, "merged", 0)).unwrap();
        run_stage(&cfg, "merge").unwrap();
        assert_eq!(fs::read(cfg.out_dir.join("report_merge.json")).unwrap(), before);
        assert_eq!(fs::read(map_pgm(&cfg.out_dir, "merged", 0)).unwrap(), merged_before);
    }

    #[test]
    fn missing_artifacts_and_bad_schema_are_hard_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = mini_config(tmp.path());
        // Trace before anything exists: the scene artifact is missing.
        match stage_trace(&cfg) {
            Err(PipelineError::MissingArtifact { .. }) => {}
            other => panic!("expected MissingArtifact, got {other:?}"),
        }

        run_stage(&cfg, "generate").unwrap();
        let path = report_path(&cfg.out_dir, "generate");
        let mut report: StageReport = read_json(&path).unwrap();
        report.schema_version = 99;
        write_json(&path, &report).unwrap();
        match load_report(&cfg.out_dir, "generate") {
            Err(PipelineError::SchemaVersion { got: 99, .. }) => {}
            other => panic!("expected SchemaVersion, got {other:?}"),
        }
    }

    #[test]
    fn unknown_stage_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = mini_config(tmp.path());
        assert!(matches!(
            run_stage(&cfg, "bogus"),
            Err(PipelineError::Config { .. })
        ));
    }
}
