//! Chain a point-prompted 2D segmenter around the camera ring.
//!
//! A scripted prompter replays per-view masks for one instance — some of them
//! deliberately corrupted by dilation or erosion. The walk visits half the
//! views, re-prompting each next view at the projected centers of the
//! strongest Gaussians so far, then votes a Gaussian subset and renders masks
//! for the views it never visited. Prints per-view IoU against clean ground
//! truth, split into visited and held-out views.
//!
//!     cargo run --release --example self_prompt_walk

use std::error::Error;

use splatseg::instance::Mask;
use splatseg::lift::{self_prompt, MaskPrompter};
use splatseg::render::{render_gt_instance_map, RenderOptions};
use splatseg::scene::{generate_scene, SceneSpec};
use splatseg::trace::TraceOptions;

fn main() -> Result<(), Box<dyn Error>> {
    let scene = generate_scene(&SceneSpec {
        objects: 3,
        disks_per_side: 6,
        views: 8,
        image_width: 96,
        image_height: 96,
        seed: 47,
        ..SceneSpec::default()
    })?;
    let maps: Vec<_> = (0..scene.views.len())
        .map(|v| render_gt_instance_map(&scene, v, &RenderOptions::default()))
        .collect::<Result<_, _>>()?;

    let target_id = 1;
    let gt_masks: Vec<Mask> = maps.iter().map(|m| Mask::from_label(m, target_id)).collect();

    // The prompter's masks drift from ground truth: every other view is
    // dilated or eroded by one pixel, as a sloppy external segmenter would be.
    let mut supplied = gt_masks.clone();
    for (v, mask) in supplied.iter_mut().enumerate() {
        *mask = match v % 4 {
            1 => mask.dilate(1),
            3 => mask.erode(1),
            _ => mask.clone(),
        };
    }
    let mut prompter = MaskPrompter { masks: supplied };

    let reference_view = 0;
    let seed_point = gt_masks[reference_view]
        .centroid()
        .map(|(x, y)| (x as u32, y as u32))
        .expect("target visible in reference view");
    let max_views = scene.views.len() / 2;
    println!(
        "walking {} of {} views from view {} (seed point {:?})",
        max_views,
        scene.views.len(),
        reference_view,
        seed_point
    );

    let result = self_prompt(
        &scene,
        reference_view,
        &[seed_point],
        &mut prompter,
        max_views,
        &TraceOptions::default(),
    )?;
    println!("vote selected {} gaussians", result.selected.len());

    let mut owned = 0u32;
    let mut recalled = 0u32;
    let mut contaminated = 0u32;
    for (i, g) in scene.gaussians.iter().enumerate() {
        let is_target = g.gt_instance == Some(target_id);
        let picked = result.selected.binary_search(&(i as u32)).is_ok();
        owned += is_target as u32;
        recalled += (is_target && picked) as u32;
        contaminated += (!is_target && picked) as u32;
    }
    println!("vs generator ownership: recall {recalled}/{owned}, contamination {contaminated}");

    println!("view   source     IoU vs clean gt");
    let mut visited_sum = (0.0, 0usize);
    let mut held_out_sum = (0.0, 0usize);
    for (v, mask) in result.masks.iter().enumerate() {
        let visited = (v + scene.views.len() - reference_view) % scene.views.len() < max_views;
        let iou = mask.iou(&gt_masks[v]);
        let bucket = if visited { &mut visited_sum } else { &mut held_out_sum };
        bucket.0 += iou;
        bucket.1 += 1;
        println!("{:>4}   {:<8}   {:.4}", v, if visited { "prompter" } else { "rendered" }, iou);
    }
    println!(
        "mean IoU: visited {:.4}, held-out {:.4} (held-out masks come from the \
         3-sigma render of the voted subset, so the halo costs them IoU)",
        visited_sum.0 / visited_sum.1 as f64,
        held_out_sum.0 / held_out_sum.1 as f64
    );
    Ok(())
}
