//! Spot-check the analytic gradients against central finite differences.
//!
//! Covers both differentiable surfaces: the appearance gradients of the
//! rasterizer (color, opacity, feature channels through the full blending
//! chain) and the contrastive feature loss.
//!
//!     cargo run --release --example gradient_check

use std::error::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use splatseg::lift::contrastive_loss;
use splatseg::render::{appearance_gradients, render, RenderOptions};
use splatseg::scene::{generate_scene, Scene, SceneSpec};

fn main() -> Result<(), Box<dyn Error>> {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let scene = generate_scene(&SceneSpec {
        objects: 2,
        disks_per_side: 3,
        views: 8,
        image_width: 32,
        image_height: 32,
        feature_dim: 4,
        seed: 11,
        ..SceneSpec::default()
    })?;

    // Random projection loss L = <d_color, image> + <d_feature, features>:
    // its true image-space gradient is the projection itself, so the
    // analytic path is exercised end to end.
    let options = RenderOptions { with_features: true, ..RenderOptions::default() };
    let pixels = 32 * 32;
    let d_color: Vec<f64> = (0..pixels * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d_feature: Vec<f64> =
        (0..pixels * scene.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |scene: &Scene| -> Result<f64, Box<dyn Error>> {
        let out = render(scene, 0, &options)?;
        let mut value = 0.0;
        for (a, b) in out.color.iter().zip(&d_color) {
            value += a * b;
        }
        for (a, b) in out.feature.as_ref().unwrap().iter().zip(&d_feature) {
            value += a * b;
        }
        Ok(value)
    };
    let analytic = appearance_gradients(&scene, 0, &options, &d_color, Some(&d_feature))?;

    let h = 1e-5;
    println!("appearance gradients vs central differences (h = {h:.0e}):");
    println!("{:>22} {:>14} {:>14} {:>10}", "parameter", "analytic", "numeric", "rel err");
    for pick in 0..6 {
        let i = rng.gen_range(0..scene.gaussians.len());
        let (name, grad, step): (String, f64, Box<dyn Fn(&mut Scene, f64)>) = match pick % 3 {
            0 => {
                let c = rng.gen_range(0..3);
                (
                    format!("gaussian {i} color[{c}]"),
                    analytic.color[i * 3 + c],
                    Box::new(move |s: &mut Scene, e: f64| s.gaussians[i].color[c] += e),
                )
            }
            1 => (
                format!("gaussian {i} opacity"),
                analytic.opacity[i],
                Box::new(move |s: &mut Scene, e: f64| s.gaussians[i].opacity += e),
            ),
            _ => {
                let k = rng.gen_range(0..scene.feature_dim);
                (
                    format!("gaussian {i} feature[{k}]"),
                    analytic.feature.as_ref().unwrap()[i * scene.feature_dim + k],
                    Box::new(move |s: &mut Scene, e: f64| s.gaussians[i].feature[k] += e),
                )
            }
        };
        let mut plus = scene.clone();
        step(&mut plus, h);
        let mut minus = scene.clone();
        step(&mut minus, -h);
        let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        let rel = (grad - numeric).abs() / grad.abs().max(numeric.abs()).max(1e-3);
        println!("{name:>22} {grad:>14.8} {numeric:>14.8} {rel:>10.2e}");
    }

    // The contrastive loss returns its own gradient.
    let (n, d, tau) = (24usize, 6usize, 0.5);
    let labels: Vec<u32> = (0..n as u32).map(|i| 1 + i % 3).collect();
    let features: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let (value, grad) = contrastive_loss(&features, d, &labels, tau, false)?;
    println!("\ncontrastive loss {value:.6}, gradient vs central differences:");
    println!("{:>22} {:>14} {:>14} {:>10}", "parameter", "analytic", "numeric", "rel err");
    for _ in 0..6 {
        let j = rng.gen_range(0..n * d);
        let hc = 1e-6;
        let mut plus = features.clone();
        plus[j] += hc;
        let mut minus = features.clone();
        minus[j] -= hc;
        let lp = contrastive_loss(&plus, d, &labels, tau, false)?.0;
        let lm = contrastive_loss(&minus, d, &labels, tau, false)?.0;
        let numeric = (lp - lm) / (2.0 * hc);
        let rel = (grad[j] - numeric).abs() / grad[j].abs().max(numeric.abs()).max(1e-3);
        println!("{:>22} {:>14.8} {numeric:>14.8} {rel:>10.2e}", format!("feature[{j}]"), grad[j]);
    }
    Ok(())
}
