//! Segment one object across every view from a single reference mask.
//!
//! Lifts contrastive features, takes the ground-truth mask of one instance in
//! one view as the "user click" region, and lets the query segmenter pick
//! probe points, threshold the similarity field, and emit a mask per view.
//! Prints the per-view IoU of the predicted masks against ground truth.
//!
//!     cargo run --release --example click_to_segment

use std::error::Error;

use splatseg::instance::Mask;
use splatseg::lift::{query_segment, train_contrastive, ContrastiveConfig, QueryConfig};
use splatseg::render::{render_gt_instance_map, RenderOptions};
use splatseg::scene::{generate_scene, SceneSpec};

fn main() -> Result<(), Box<dyn Error>> {
    let scene = generate_scene(&SceneSpec {
        objects: 3,
        disks_per_side: 6,
        views: 8,
        image_width: 96,
        image_height: 96,
        feature_dim: 8,
        seed: 29,
        ..SceneSpec::default()
    })?;
    let maps: Vec<_> = (0..scene.views.len())
        .map(|v| render_gt_instance_map(&scene, v, &RenderOptions::default()))
        .collect::<Result<_, _>>()?;
    let map_refs: Vec<_> = maps.iter().collect();

    let (lifted, losses) = train_contrastive(
        &scene,
        &map_refs,
        &ContrastiveConfig {
            feature_dim: scene.feature_dim,
            lr: 1e-2,
            steps: 600,
            pixels_per_step: 192,
            seed: 31,
            ..ContrastiveConfig::default()
        },
    )?;
    println!(
        "lifted features in {} steps (loss {:.4} -> {:.4})",
        losses.len(),
        losses.first().unwrap(),
        losses.last().unwrap()
    );

    let reference_view = 0;
    let target_id = 1;
    let reference = Mask::from_label(&maps[reference_view], target_id);
    println!(
        "query: instance {} in view {} ({} px reference mask)",
        target_id,
        reference_view,
        reference.count()
    );

    let result = query_segment(&lifted, reference_view, &reference, &QueryConfig::default())?;
    println!(
        "segmenter placed {} probe point(s), threshold {:?}, selected {} gaussians",
        result.query_points.len(),
        result.threshold.map(|t| (t * 1e4).round() / 1e4),
        result.selected.len()
    );

    println!("view   predicted px   gt px   IoU");
    let mut worst = f64::INFINITY;
    let mut sum = 0.0;
    for (v, predicted) in result.masks.iter().enumerate() {
        let gt = Mask::from_label(&maps[v], target_id);
        let iou = predicted.iou(&gt);
        worst = worst.min(iou);
        sum += iou;
        println!("{:>4}   {:>12}   {:>5}   {:.4}", v, predicted.count(), gt.count(), iou);
    }
    println!(
        "mean IoU {:.4}, min IoU {:.4} over {} views",
        sum / result.masks.len() as f64,
        worst,
        result.masks.len()
    );
    Ok(())
}
