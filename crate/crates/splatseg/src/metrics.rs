//! Photometric and mask metrics for [0, 1] images.
//!
//! PSNR is reported either over the full frame or restricted to the
//! ground-truth mask's bounding box expanded outward by 10 pixels (clamped to
//! the frame), so background left untouched by an edit does not mask errors
//! near the object. An exact match yields +∞, serialized as the string
//! sentinel `"inf"` since JSON has no infinity literal.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::instance::Mask;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{what}: expected {expected} samples, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("mask is empty")]
    EmptyMask,
}

/// PSNR value in dB; +∞ means the compared regions were bit-identical.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Decibels(pub f64);

impl Serialize for Decibels {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(self.0)
        } else {
            serializer.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Decibels {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Decibels, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(db) => Ok(Decibels(db)),
            Raw::Text(s) if s == "inf" => Ok(Decibels(f64::INFINITY)),
            Raw::Text(s) => Err(D::Error::custom(format!("bad PSNR sentinel {s:?}"))),
        }
    }
}

fn psnr_from_mse(mse: f64) -> Decibels {
    if mse == 0.0 {
        Decibels(f64::INFINITY)
    } else {
        Decibels(10.0 * (1.0 / mse).log10())
    }
}

/// PSNR over the whole frame of two H*W*3 images.
pub fn psnr_full(render: &[f64], reference: &[f64]) -> Result<Decibels, MetricsError> {
    if render.len() != reference.len() || render.is_empty() {
        return Err(MetricsError::DimensionMismatch {
            what: "reference",
            expected: render.len().max(1),
            got: reference.len(),
        });
    }
    let mse = render
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / render.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// PSNR over the mask's bounding box expanded outward by 10 pixels, clamped
/// to the frame. Images are H*W*3 row-major matching the mask dimensions.
pub fn psnr_restricted(render: &[f64], reference: &[f64], gt_mask: &Mask) -> Result<Decibels, MetricsError> {
    let (w, h) = (gt_mask.width as usize, gt_mask.height as usize);
    if render.len() != w * h * 3 {
        return Err(MetricsError::DimensionMismatch { what: "render", expected: w * h * 3, got: render.len() });
    }
    if reference.len() != w * h * 3 {
        return Err(MetricsError::DimensionMismatch {
            what: "reference",
            expected: w * h * 3,
            got: reference.len(),
        });
    }
    let (x0, y0, x1, y1) = gt_mask.bbox().ok_or(MetricsError::EmptyMask)?;
    let x0 = x0.saturating_sub(10) as usize;
    let y0 = y0.saturating_sub(10) as usize;
    let x1 = ((x1 + 10) as usize).min(w - 1);
    let y1 = ((y1 + 10) as usize).min(h - 1);
    let mut sum = 0.0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let base = (y * w + x) * 3;
            for c in 0..3 {
                let d = render[base + c] - reference[base + c];
                sum += d * d;
            }
        }
    }
    let samples = ((y1 - y0 + 1) * (x1 - x0 + 1) * 3) as f64;
    Ok(psnr_from_mse(sum / samples))
}

/// Binary mask of an H*W*3 render on black: a pixel is in iff any channel
/// exceeds 1e-6.
pub fn mask_from_render(render: &[f64], width: u32, height: u32) -> Result<Mask, MetricsError> {
    let n = (width as usize) * (height as usize);
    if render.len() != n * 3 {
        return Err(MetricsError::DimensionMismatch { what: "render", expected: n * 3, got: render.len() });
    }
    let mut mask = Mask::new(width, height);
    for p in 0..n {
        if render[p * 3..p * 3 + 3].iter().any(|&c| c > 1e-6) {
            mask.pixels[p] = true;
        }
    }
    Ok(mask)
}
