//! Split-and-prune density control on a Gaussian that straddles two objects.
//!
//! A disk bridging two panels is traced as ambiguous: no single instance
//! dominates its blend mass in most views. Each refinement round refits
//! appearance, splits flagged Gaussians into smaller children sampled from
//! the parent footprint, and prunes whatever remains ambiguous, so committed
//! children survive and the straddler disappears without losing image
//! quality.
//!
//!     cargo run --release --example resolve_straddler

use std::error::Error;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use splatseg::refine::{run_refinement, RefineConfig};
use splatseg::render::{render, render_gt_instance_map};
use splatseg::scene::{generate_scene, GaussianDisk, PanelSpec, SceneSpec};

fn main() -> Result<(), Box<dyn Error>> {
    let mut scene = generate_scene(&SceneSpec {
        objects: 2,
        disks_per_side: 4,
        panel_layout: Some(vec![
            PanelSpec { center: [-2.2, 0.0, 0.0], half_size: 1.0, opacity: None },
            PanelSpec { center: [2.2, 0.0, 0.0], half_size: 1.0, opacity: None },
        ]),
        views: 8,
        image_width: 48,
        image_height: 48,
        feature_dim: 0,
        seed: 21,
        ..SceneSpec::default()
    })?;
    scene.gaussians.push(GaussianDisk {
        center: Vector3::zeros(),
        tangent_u: Vector3::x(),
        tangent_v: Vector3::y(),
        scale_u: 0.8,
        scale_v: 0.4,
        opacity: 0.15,
        color: [0.3, 0.3, 0.3],
        feature: Vec::new(),
        gt_instance: None,
    });
    println!("scene: {} Gaussians, the last one straddling both panels", scene.gaussians.len());

    let config = RefineConfig { round_period: 60, refit_lr: 0.5, ..RefineConfig::default() };
    let maps: Vec<_> = (0..scene.views.len())
        .map(|v| render_gt_instance_map(&scene, v, &config.trace.render))
        .collect::<Result<_, _>>()?;
    let map_refs: Vec<_> = maps.iter().collect();
    let targets: Vec<_> = (0..scene.views.len())
        .map(|v| render(&scene, v, &config.trace.render).map(|out| out.color))
        .collect::<Result<_, _>>()?;

    // Jitter the colors so the appearance refit has real work to do.
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for disk in &mut scene.gaussians {
        for c in 0..3 {
            disk.color[c] = (disk.color[c] + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
        }
    }

    let outcome = run_refinement(&scene, &map_refs, &targets, &config, &mut rng)?;
    println!("initially ambiguous: {}", outcome.reports[0].n_ambiguous());
    println!(
        "{:>6} {:>10} {:>10} {:>7} {:>7} {:>10}",
        "round", "gaussians", "ambiguous", "split", "pruned", "psnr (dB)"
    );
    for record in &outcome.rounds {
        println!(
            "{:>6} {:>10} {:>10} {:>7} {:>7} {:>10.2}",
            record.round,
            record.n_gaussians,
            record.n_ambiguous,
            record.n_split,
            record.n_pruned,
            record.psnr.0
        );
    }
    let survivors = outcome.scene.gaussians.len();
    println!("final scene: {survivors} Gaussians, nothing left ambiguous");
    Ok(())
}
