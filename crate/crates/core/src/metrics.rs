//! DSM accuracy (MAE, RMSE, PAG) and image PSNR.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::DsmGrid;
use crate::raster::RasterF32;

pub const DEFAULT_PAG_THRESHOLDS: [f64; 2] = [2.5, 7.5];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no cell has data in both grids")]
    NoComparableCells,
    #[error("grids are not co-registered and resampling is disabled")]
    GridMismatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PagEntry {
    pub threshold: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmReport {
    pub mae: f64,
    pub rmse: f64,
    pub pag: Vec<PagEntry>,
    pub n_cells: usize,
    pub n_excluded: usize,
    /// Median offset removed before scoring, when that diagnostic is on.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_offset: Option<f64>,
}

impl DsmReport {
    pub fn pag_at(&self, threshold: f64) -> Option<f64> {
        self.pag
            .iter()
            .find(|e| e.threshold == threshold)
            .map(|e| e.percent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsOptions {
    pub thresholds: Vec<f64>,
    /// Nearest-neighbour resample the prediction onto the ground-truth grid
    /// when the two are not co-registered.
    pub resample: bool,
    /// Subtract the median signed error first. Diagnostic, off by default.
    pub median_offset: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_PAG_THRESHOLDS.to_vec(),
            resample: true,
            median_offset: false,
        }
    }
}

/// Scores `pred` against `gt` with the default thresholds. `exclude` is a
/// per-gt-cell flag (true = skip), e.g. a water mask.
pub fn dsm_metrics(
    pred: &DsmGrid,
    gt: &DsmGrid,
    exclude: Option<&[bool]>,
) -> Result<DsmReport, MetricsError> {
    dsm_metrics_with(pred, gt, exclude, &MetricsOptions::default())
}

pub fn dsm_metrics_with(
    pred: &DsmGrid,
    gt: &DsmGrid,
    exclude: Option<&[bool]>,
    opts: &MetricsOptions,
) -> Result<DsmReport, MetricsError> {
    let n_gt = gt.spec.rows * gt.spec.cols;
    if exclude.is_some_and(|m| m.len() != n_gt) {
        return Err(MetricsError::ShapeMismatch("exclusion mask".into()));
    }
    let aligned = pred.spec.coregistered(&gt.spec);
    if !aligned && !opts.resample {
        return Err(MetricsError::GridMismatch);
    }
    if !aligned {
        log::warn!("metrics grids differ, resampling prediction by nearest neighbour");
    }
    let pred_frame = pred.spec.frame();
    let gt_frame = gt.spec.frame();
    let pred_at = |r: usize, c: usize| -> Option<f32> {
        if aligned {
            return pred.get(r, c);
        }
        let (e, n) = gt.spec.cell_center(r, c);
        let [pe, pn, _] = pred_frame.from_frame(&gt_frame, [e, n, 0.0]);
        let (pr, pc) = pred.spec.cell_of(pe, pn)?;
        pred.get(pr, pc)
    };

    let mut errors = Vec::new();
    let mut n_excluded = 0usize;
    for r in 0..gt.spec.rows {
        for c in 0..gt.spec.cols {
            let (Some(g), Some(p)) = (gt.get(r, c), pred_at(r, c)) else {
                continue;
            };
            if exclude.is_some_and(|m| m[r * gt.spec.cols + c]) {
                n_excluded += 1;
                continue;
            }
            errors.push(p as f64 - g as f64);
        }
    }
    if errors.is_empty() {
        return Err(MetricsError::NoComparableCells);
    }
    let median_offset = opts.median_offset.then(|| {
        let mut s = errors.clone();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    });
    if let Some(off) = median_offset {
        errors.iter_mut().for_each(|e| *e -= off);
    }
    let n = errors.len() as f64;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let pag = opts
        .thresholds
        .iter()
        .map(|&t| PagEntry {
            threshold: t,
            percent: 100.0 * errors.iter().filter(|e| e.abs() < t).count() as f64 / n,
        })
        .collect();
    // guard against rounding pushing rmse a hair below mae
    let rmse = rmse.max(mae);
    Ok(DsmReport {
        mae,
        rmse,
        pag,
        n_cells: errors.len(),
        n_excluded,
        median_offset,
    })
}

/// `10·log10(peak² / MSE)` over jointly valid pixels; identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &RasterF32, b: &RasterF32, peak: f64) -> Result<f64, MetricsError> {
    if !a.same_shape(b) {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for idx in 0..a.pixel_count() {
        if !(a.is_valid_at(idx) && b.is_valid_at(idx)) {
            continue;
        }
        for (x, y) in a.pixel(idx).iter().zip(b.pixel(idx)) {
            let d = *x as f64 - *y as f64;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::ShapeMismatch("no jointly valid pixel".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
