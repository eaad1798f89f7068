//! Self-supervised loss terms used to score reconstructions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cscm::TransientMask;
use crate::raster::RasterF32;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least 2 jointly valid pixels, found {0}")]
    TooFewPixels(usize),
    #[error("mask has no stable pixel")]
    EmptyMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub hei_corr: f64,
    pub l_hei: f64,
    pub l_rgb_mse: f64,
    pub l_total: f64,
    pub n_pixels_used: usize,
}

/// Pearson correlation between a relative height raster and a predicted
/// height raster over jointly valid pixels, and the loss `1 − r`. A
/// zero-variance input gives `r = 0`.
pub fn pearson_height_loss(
    h_rel: &RasterF32,
    h_pred: &RasterF32,
) -> Result<(f64, f64, usize), LossError> {
    if !h_rel.same_dims(h_pred) {
        return Err(LossError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            h_rel.dims(),
            h_pred.dims()
        )));
    }
    let pairs = || {
        (0..h_rel.pixel_count())
            .filter(|&i| h_rel.is_valid_at(i) && h_pred.is_valid_at(i))
            .map(|i| (h_rel.pixel(i)[0] as f64, h_pred.pixel(i)[0] as f64))
    };
    let n = pairs().count();
    if n < 2 {
        return Err(LossError::TooFewPixels(n));
    }
    let (sx, sy) = pairs().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let (mut cov, mut vx, mut vy) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in pairs() {
        let (dx, dy) = (x - mx, y - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    let denom = (vx * vy).sqrt();
    let r = if denom > 0.0 && denom.is_finite() {
        (cov / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok((r, 1.0 - r, n))
}

/// Optional perceptual term added to the masked MSE. Receives the render,
/// the ground truth and the mask; the default contributes nothing.
pub type PerceptualHook<'a> = &'a dyn Fn(&RasterF32, &RasterF32, &TransientMask) -> f64;

/// Mean squared difference over stable pixels (averaged over channels too).
pub fn masked_photometric(
    render: &RasterF32,
    gt: &RasterF32,
    mask: &TransientMask,
) -> Result<f64, LossError> {
    masked_photometric_with(render, gt, mask, None)
}

pub fn masked_photometric_with(
    render: &RasterF32,
    gt: &RasterF32,
    mask: &TransientMask,
    perceptual: Option<PerceptualHook<'_>>,
) -> Result<f64, LossError> {
    if !render.same_shape(gt) || (mask.height, mask.width) != render.dims() {
        return Err(LossError::ShapeMismatch("render, ground truth and mask".into()));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (idx, &stable) in mask.stable.iter().enumerate() {
        if !stable {
            continue;
        }
        n += 1;
        for (a, b) in render.pixel(idx).iter().zip(gt.pixel(idx)) {
            let d = *a as f64 - *b as f64;
            sum += d * d;
        }
    }
    if n == 0 {
        return Err(LossError::EmptyMask);
    }
    let mse = sum / (n * render.channels()) as f64;
    Ok(mse + perceptual.map_or(0.0, |f| f(render, gt, mask)))
}

/// `l_rgb + weight · l_hei`; the weight defaults to 1.
pub fn total_loss(l_rgb: f64, l_hei: f64) -> f64 {
    weighted_total_loss(l_rgb, l_hei, 1.0)
}

pub fn weighted_total_loss(l_rgb: f64, l_hei: f64, hei_weight: f64) -> f64 {
    l_rgb + hei_weight * l_hei
}
