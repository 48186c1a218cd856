//! Generate a synthetic labeled scene and rasterize every camera of its ring.
//!
//! Writes one PPM per view plus a 16-bit PGM of each view's ground-truth
//! instance map under target/example_render_views/.
//!
//!     cargo run --release --example render_views

use std::error::Error;
use std::fs;
use std::path::PathBuf;

use splatseg::formats::{write_pgm16_to_path, write_ppm_to_path};
use splatseg::render::{render, render_gt_instance_map, RenderOptions};
use splatseg::scene::{generate_scene, SceneSpec};

fn main() -> Result<(), Box<dyn Error>> {
    let spec = SceneSpec {
        objects: 4,
        disks_per_side: 8,
        views: 8,
        image_width: 160,
        image_height: 160,
        seed: 7,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec)?;
    println!(
        "scene: {} Gaussians over {} objects, {} views at {}x{}",
        scene.gaussians.len(),
        spec.objects,
        scene.views.len(),
        spec.image_width,
        spec.image_height
    );

    let out = PathBuf::from("target/example_render_views");
    fs::create_dir_all(&out)?;
    let options = RenderOptions::default();
    for v in 0..scene.views.len() {
        let image = render(&scene, v, &options)?;
        let mean_residual =
            image.transmittance.iter().sum::<f64>() / image.transmittance.len() as f64;
        let labels = render_gt_instance_map(&scene, v, &options)?;
        let labeled = labels.ids.iter().filter(|&&id| id > 0).count();
        write_ppm_to_path(out.join(format!("view_{v}.ppm")), image.width, image.height, &image.color)?;
        write_pgm16_to_path(out.join(format!("gt_{v}.pgm")), labels.width, labels.height, &labels.ids)?;
        println!(
            "view {v}: {} fragments, mean residual transmittance {mean_residual:.4}, {} labeled pixels",
            image.fragments, labeled
        );
    }
    println!("wrote images to {}", out.display());
    Ok(())
}
