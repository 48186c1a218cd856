//! Reverse-rasterize instance labels into per-Gaussian patch distributions.
//!
//! Traces every view of a labeled scene, prints how decisively the Gaussians
//! commit to a single instance, and round-trips the sparse weight matrix
//! through its binary file format.
//!
//!     cargo run --release --example trace_instances

use std::error::Error;
use std::fs;
use std::path::PathBuf;

use splatseg::render::render_gt_instance_map;
use splatseg::scene::{generate_scene, SceneSpec};
use splatseg::trace::{trace_all, TraceOptions, WeightMatrix};

fn main() -> Result<(), Box<dyn Error>> {
    let scene = generate_scene(&SceneSpec {
        objects: 3,
        disks_per_side: 6,
        views: 8,
        image_width: 96,
        image_height: 96,
        seed: 3,
        ..SceneSpec::default()
    })?;
    let options = TraceOptions::default();
    let maps: Vec<_> = (0..scene.views.len())
        .map(|v| render_gt_instance_map(&scene, v, &options.render))
        .collect::<Result<_, _>>()?;
    let map_refs: Vec<_> = maps.iter().collect();
    let (matrix, stats) = trace_all(&scene, &map_refs, &options)?;

    // Every non-empty row is a distribution over the view's instance patches.
    let mut histogram = [0usize; 10]; // row max binned in tenths
    let mut visible_rows = 0usize;
    for view in &matrix.views {
        for row in &view.rows {
            if row.is_empty() {
                continue;
            }
            let max = row.iter().map(|&(_, p)| p).fold(0.0, f64::max);
            histogram[((max * 10.0) as usize).min(9)] += 1;
            visible_rows += 1;
        }
    }
    println!(
        "{} Gaussians x {} views -> {visible_rows} visible rows",
        matrix.n_gaussians(),
        matrix.n_views()
    );
    println!("row-max histogram (how decisively a Gaussian commits to one instance):");
    for (bin, count) in histogram.iter().enumerate() {
        let share = 100.0 * *count as f64 / visible_rows as f64;
        println!("  [{:.1}, {:.1}): {count:>6} ({share:>5.1}%)", bin as f64 / 10.0, (bin + 1) as f64 / 10.0);
    }
    let background: f64 = stats.iter().map(|s| s.background_mass.iter().sum::<f64>()).sum();
    println!("total blend mass on unlabeled pixels: {background:.1}");

    // The sparse matrix round-trips bit-for-bit through its file format.
    let out = PathBuf::from("target/example_trace_instances");
    fs::create_dir_all(&out)?;
    let path = out.join("weights.swmx");
    matrix.save_swmx_to_path(&path)?;
    let reloaded = WeightMatrix::load_swmx_from_path(&path)?;
    assert_eq!(matrix, reloaded, "weight matrix must round-trip exactly");
    println!("weight matrix round-tripped through {}", path.display());
    Ok(())
}
