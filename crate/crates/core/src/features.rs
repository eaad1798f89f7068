//! Photometric matching features and per-pixel cosine similarity.
//!
//! Two built-in extractors stand in for learned descriptors:
//!
//! * [`FeatureKind::Rgb`]: the image itself, each channel standardized.
//! * [`FeatureKind::GradCensus`]: 8 channels, x/y Sobel gradients of the
//!   luminance plus a 6-neighbour soft census, each channel standardized.
//!   Invariant to positive-gain affine changes of the input.
//! * [`FeatureKind::RgbGradCensus`]: both of the above stacked.
//!
//! Externally computed rasters with any channel count can be used in place
//! of either.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::{RasterError, RasterF32};

/// Variances below this are treated as zero and replaced by 1.
const MIN_VARIANCE: f64 = 1e-12;
const MIN_NORM: f64 = 1e-12;

/// Census neighbours as (row, col) offsets: the 4-neighbourhood plus the
/// main diagonal.
const CENSUS_OFFSETS: [(isize, isize); 6] = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Rgb,
    #[default]
    GradCensus,
    RgbGradCensus,
}

impl std::str::FromStr for FeatureKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "grad_census" => Ok(Self::GradCensus),
            "rgb_grad_census" => Ok(Self::RgbGradCensus),
            other => Err(format!("unknown feature kind `{other}`")),
        }
    }
}

pub fn extract_builtin(image: &RasterF32, kind: FeatureKind) -> Result<RasterF32, RasterError> {
    if image.channels() != 1 && image.channels() != 3 {
        return Err(RasterError::BadChannelCount(image.channels()));
    }
    match kind {
        FeatureKind::Rgb => {
            let mut out = image.clone();
            standardize(&mut out);
            Ok(out)
        }
        FeatureKind::GradCensus => Ok(grad_census(image)),
        FeatureKind::RgbGradCensus => {
            let rgb = extract_builtin(image, FeatureKind::Rgb)?;
            Ok(stack(&rgb, &grad_census(image)))
        }
    }
}

/// Channel-wise concatenation; a pixel is valid where both inputs are.
fn stack(a: &RasterF32, b: &RasterF32) -> RasterF32 {
    let (h, w) = a.dims();
    let (ca, cb) = (a.channels(), b.channels());
    let mut out = RasterF32::zeros(h, w, ca + cb);
    for idx in 0..h * w {
        let px = out.pixel_mut(idx);
        px[..ca].copy_from_slice(a.pixel(idx));
        px[ca..].copy_from_slice(b.pixel(idx));
    }
    if a.mask().is_some() || b.mask().is_some() {
        let mask = (0..h * w).map(|i| a.is_valid_at(i) && b.is_valid_at(i)).collect();
        out = out.with_mask(mask).expect("mask sized to raster");
    }
    out
}

/// Box mean over a `(2r+1)²` window of valid pixels, per channel. Invalid
/// pixels stay invalid and keep their values.
pub fn box_smooth(r: &RasterF32, radius: usize) -> RasterF32 {
    if radius == 0 {
        return r.clone();
    }
    let (h, w, c) = (r.height(), r.width(), r.channels());
    let k = radius as isize;
    let mut out = r.clone();
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(row, data_row)| {
            let mut acc = vec![0.0f64; c];
            for col in 0..w {
                if !r.is_valid(row, col) {
                    continue;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut n = 0.0;
                for rr in (row as isize - k).max(0)..=(row as isize + k).min(h as isize - 1) {
                    for cc in (col as isize - k).max(0)..=(col as isize + k).min(w as isize - 1) {
                        let idx = rr as usize * w + cc as usize;
                        if !r.is_valid_at(idx) {
                            continue;
                        }
                        for (a, &v) in acc.iter_mut().zip(r.pixel(idx)) {
                            *a += v as f64;
                        }
                        n += 1.0;
                    }
                }
                for (o, a) in data_row[col * c..(col + 1) * c].iter_mut().zip(&acc) {
                    *o = (a / n) as f32;
                }
            }
        });
    out
}

/// Per-channel zero mean and unit variance over valid pixels, in place.
pub fn standardize(r: &mut RasterF32) {
    let c = r.channels();
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut n = 0usize;
    for idx in 0..r.pixel_count() {
        if !r.is_valid_at(idx) {
            continue;
        }
        n += 1;
        for (k, &v) in r.pixel(idx).iter().enumerate() {
            sum[k] += v as f64;
        }
    }
    if n == 0 {
        return;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    for idx in 0..r.pixel_count() {
        if !r.is_valid_at(idx) {
            continue;
        }
        for (k, &v) in r.pixel(idx).iter().enumerate() {
            let d = v as f64 - mean[k];
            sq[k] += d * d;
        }
    }
    let inv_std: Vec<f64> = sq
        .iter()
        .map(|s| {
            let var = s / n as f64;
            1.0 / if var < MIN_VARIANCE { 1.0 } else { var.sqrt() }
        })
        .collect();
    for idx in 0..r.pixel_count() {
        let valid = r.is_valid_at(idx);
        for (k, v) in r.pixel_mut(idx).iter_mut().enumerate() {
            *v = if valid {
                ((*v as f64 - mean[k]) * inv_std[k]) as f32
            } else {
                0.0
            };
        }
    }
}

fn grad_census(image: &RasterF32) -> RasterF32 {
    let (h, w) = image.dims();
    let gray = image.to_gray();
    let lum = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        gray.get(r, c, 0) as f64
    };

    // Global luminance spread sets the soft-census slope, so a gain on the
    // input cancels.
    let mut n = 0usize;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for idx in 0..gray.pixel_count() {
        if gray.is_valid_at(idx) {
            let v = gray.data()[idx] as f64;
            n += 1;
            s += v;
            s2 += v * v;
        }
    }
    let spread = if n > 0 {
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        if var < MIN_VARIANCE {
            1.0
        } else {
            var.sqrt()
        }
    } else {
        1.0
    };

    let mut out = RasterF32::zeros(h, w, 8);
    let mut mask = vec![true; h * w];
    for row in 0..h {
        for col in 0..w {
            let (r, c) = (row as isize, col as isize);
            if image.mask().is_some() {
                let mut ok = true;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let rr = (r + dr).clamp(0, h as isize - 1) as usize;
                        let cc = (c + dc).clamp(0, w as isize - 1) as usize;
                        ok &= image.is_valid(rr, cc);
                    }
                }
                mask[row * w + col] = ok;
            }
            let gx = (lum(r - 1, c + 1) + 2.0 * lum(r, c + 1) + lum(r + 1, c + 1))
                - (lum(r - 1, c - 1) + 2.0 * lum(r, c - 1) + lum(r + 1, c - 1));
            let gy = (lum(r + 1, c - 1) + 2.0 * lum(r + 1, c) + lum(r + 1, c + 1))
                - (lum(r - 1, c - 1) + 2.0 * lum(r - 1, c) + lum(r - 1, c + 1));
            let center = lum(r, c);
            let px = out.pixel_mut(row * w + col);
            px[0] = gx as f32;
            px[1] = gy as f32;
            for (k, (dr, dc)) in CENSUS_OFFSETS.iter().enumerate() {
                px[2 + k] = ((lum(r + dr, c + dc) - center) / spread).tanh() as f32;
            }
        }
    }
    if image.mask().is_some() {
        out = out.with_mask(mask).expect("mask sized to raster");
    }
    standardize(&mut out);
    out
}

/// Per-pixel cosine similarity of two rasters with equal shape.
///
/// Output is single-channel in [-1, 1]; pixels where either vector is
/// (numerically) zero or either input is invalid are invalid.
pub fn cosine_map(a: &RasterF32, b: &RasterF32) -> Result<RasterF32, RasterError> {
    if !a.same_shape(b) {
        return Err(RasterError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let (h, w) = a.dims();
    let mut out = RasterF32::zeros(h, w, 1);
    let mut mask = vec![false; h * w];
    for (idx, m) in mask.iter_mut().enumerate() {
        if !(a.is_valid_at(idx) && b.is_valid_at(idx)) {
            continue;
        }
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.pixel(idx).iter().zip(b.pixel(idx)) {
            let (x, y) = (x as f64, y as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        if na < MIN_NORM || nb < MIN_NORM || !dot.is_finite() {
            continue;
        }
        out.data_mut()[idx] = (dot / (na * nb)).clamp(-1.0, 1.0) as f32;
        *m = true;
    }
    out.with_mask(mask)
}
