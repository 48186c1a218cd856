//! Carve one object's Gaussians out of a scene and render them alone.
//!
//! Feeds ground-truth per-view masks of one instance to the mask-vote
//! extractor, keeps only the winning Gaussians, and measures the isolated
//! renders: PSNR restricted to the object's ground-truth pixels, plus the IoU
//! between the rendered-coverage mask and ground truth. The coverage IoU sits
//! well below 1 by construction — Gaussians are rendered out to their 3-sigma
//! cutoff, so the isolated object carries a soft halo that the sharp
//! ground-truth mask does not have.
//!
//!     cargo run --release --example extract_subset

use std::error::Error;

use splatseg::instance::Mask;
use splatseg::lift::{extract_object, subset_scene};
use splatseg::metrics::{mask_from_render, psnr_restricted};
use splatseg::render::{render, render_gt_instance_map, RenderOptions};
use splatseg::scene::{generate_scene, SceneSpec};
use splatseg::trace::TraceOptions;

fn main() -> Result<(), Box<dyn Error>> {
    let scene = generate_scene(&SceneSpec {
        objects: 3,
        disks_per_side: 6,
        views: 8,
        image_width: 96,
        image_height: 96,
        seed: 41,
        ..SceneSpec::default()
    })?;
    let options = RenderOptions::default();
    let maps: Vec<_> = (0..scene.views.len())
        .map(|v| render_gt_instance_map(&scene, v, &options))
        .collect::<Result<_, _>>()?;

    let target_id = 2;
    let gt_masks: Vec<Mask> = maps.iter().map(|m| Mask::from_label(m, target_id)).collect();
    let extraction = extract_object(&scene, &gt_masks, &TraceOptions::default())?;
    println!(
        "instance {}: selected {} of {} gaussians ({} left in complement)",
        target_id,
        extraction.selected.len(),
        scene.gaussians.len(),
        extraction.complement.len()
    );

    // Recall/contamination against the generator's ground-truth ownership.
    let mut owned = 0u32;
    let mut recalled = 0u32;
    let mut contaminated = 0u32;
    for (i, g) in scene.gaussians.iter().enumerate() {
        let is_target = g.gt_instance == Some(target_id);
        let picked = extraction.selected.binary_search(&(i as u32)).is_ok();
        owned += is_target as u32;
        recalled += (is_target && picked) as u32;
        contaminated += (!is_target && picked) as u32;
    }
    println!(
        "vote quality: recall {}/{}, contamination {}/{}",
        recalled,
        owned,
        contaminated,
        extraction.selected.len()
    );

    let isolated = subset_scene(&scene, &extraction.selected);
    println!("view   restricted PSNR   coverage IoU");
    let mut psnr_sum = 0.0;
    let mut iou_sum = 0.0;
    for v in 0..scene.views.len() {
        let full = render(&scene, v, &options)?;
        let alone = render(&isolated, v, &options)?;
        let psnr = psnr_restricted(&alone.color, &full.color, &gt_masks[v])?.0;
        let coverage = mask_from_render(&alone.color, maps[v].width, maps[v].height)?;
        let iou = coverage.iou(&gt_masks[v]);
        psnr_sum += psnr;
        iou_sum += iou;
        println!("{:>4}   {:>12.2} dB   {:>10.4}", v, psnr, iou);
    }
    let l = scene.views.len() as f64;
    println!(
        "mean restricted PSNR {:.2} dB, mean coverage IoU {:.4}\n\
         both are bounded by rendering physics, not by the vote: the full composite \n\
         shows backdrop and neighbors through the semi-transparent object (PSNR), and \n\
         the isolated render carries a 3-sigma halo the sharp gt mask lacks (IoU)",
        psnr_sum / l,
        iou_sum / l
    );
    Ok(())
}
