//! Cross/self consistency transient masking.
//!
//! Feature agreement between the reference view and (a) source views warped
//! into it and (b) a rendering of the scene is turned into confidence maps
//! `max(2·cos − 1, 0)`. Cross-view confidence is kept where it is defined
//! and holes are filled with the self-view map rescaled by the ratio of the
//! two maps' means on their common support. Thresholding gives the binary
//! stable/transient mask.

use thiserror::Error;

use crate::features::cosine_map;
use crate::raster::{RasterError, RasterF32};

/// Default binarization threshold.
pub const DEFAULT_TAU: f32 = 0.2;

#[derive(Debug, Error)]
pub enum CscmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("confidence maps share no valid pixel")]
    NoOverlap,
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f32),
    #[error("no confidence maps to fuse")]
    Empty,
}

impl From<RasterError> for CscmError {
    fn from(e: RasterError) -> Self {
        CscmError::ShapeMismatch(e.to_string())
    }
}

/// Single-channel confidence in [0, 1] with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(pub RasterF32);

impl ConfidenceMap {
    pub fn raster(&self) -> &RasterF32 {
        &self.0
    }

    pub fn into_raster(self) -> RasterF32 {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    /// Valid-pixel mean, if any pixel is valid.
    pub fn mean(&self) -> Option<f64> {
        let (mut s, mut n) = (0.0f64, 0usize);
        for (idx, &v) in self.0.data().iter().enumerate() {
            if self.0.is_valid_at(idx) {
                s += v as f64;
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    }
}

/// Per-pixel stable (`true`) / transient (`false`) labels. Defined at every
/// pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransientMask {
    pub height: usize,
    pub width: usize,
    pub stable: Vec<bool>,
}

impl TransientMask {
    pub fn all_stable(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            stable: vec![true; height * width],
        }
    }

    pub fn is_stable(&self, row: usize, col: usize) -> bool {
        self.stable[row * self.width + col]
    }

    pub fn transient_count(&self) -> usize {
        self.stable.iter().filter(|s| !**s).count()
    }

    /// 1.0 for stable, 0.0 for transient.
    pub fn to_raster(&self) -> RasterF32 {
        let data = self.stable.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        RasterF32::from_vec(self.height, self.width, 1, data).expect("mask dimensions")
    }

    /// Reads a mask raster; values ≥ 0.5 are stable. Invalid pixels count as
    /// stable.
    pub fn from_raster(r: &RasterF32) -> Self {
        let stable = (0..r.pixel_count())
            .map(|i| !r.is_valid_at(i) || r.pixel(i)[0] >= 0.5)
            .collect();
        Self {
            height: r.height(),
            width: r.width(),
            stable,
        }
    }
}

/// `max(2·cos − 1, 0)`: similarities at or below 0.5 give zero confidence.
#[inline]
pub fn confidence_from_cosine(cos: f32) -> f32 {
    (2.0 * cos - 1.0).max(0.0)
}

fn confidence(a: &RasterF32, b: &RasterF32) -> Result<ConfidenceMap, CscmError> {
    let cos = cosine_map(a, b)?;
    Ok(ConfidenceMap(cos.map_in_place(confidence_from_cosine)))
}

/// Cross-view confidence between reference features and one source's
/// features warped into the reference view.
pub fn cross_view_confidence(
    feat_ref: &RasterF32,
    feat_warped: &RasterF32,
) -> Result<ConfidenceMap, CscmError> {
    confidence(feat_ref, feat_warped)
}

/// Self-view confidence between reference features and features of the
/// rendered reference view.
pub fn self_view_confidence(
    feat_ref: &RasterF32,
    feat_rendered: &RasterF32,
) -> Result<ConfidenceMap, CscmError> {
    confidence(feat_ref, feat_rendered)
}

/// Per-pixel mean of several cross-view maps over the sources valid there.
pub fn mean_over_sources(maps: &[ConfidenceMap]) -> Result<ConfidenceMap, CscmError> {
    let first = maps.first().ok_or(CscmError::Empty)?;
    let (h, w) = first.dims();
    if maps.iter().any(|m| m.dims() != (h, w)) {
        return Err(CscmError::ShapeMismatch("source confidence maps".into()));
    }
    let mut out = RasterF32::zeros(h, w, 1);
    let mut mask = vec![false; h * w];
    for (idx, ok) in mask.iter_mut().enumerate() {
        let (mut s, mut n) = (0.0f64, 0usize);
        for m in maps {
            if m.0.is_valid_at(idx) {
                s += m.0.data()[idx] as f64;
                n += 1;
            }
        }
        if n > 0 {
            out.data_mut()[idx] = (s / n as f64) as f32;
            *ok = true;
        }
    }
    Ok(ConfidenceMap(out.with_mask(mask)?))
}

/// Fills holes of `q_cv` with `q_sv` rescaled by
/// `mean(q_cv) / max(mean(q_sv), 1e-6)` on their common support, clamped to
/// [0, 1]. Invalid only where both inputs are.
pub fn calibrate_and_fuse(
    q_cv: &ConfidenceMap,
    q_sv: &ConfidenceMap,
) -> Result<ConfidenceMap, CscmError> {
    if q_cv.dims() != q_sv.dims() {
        return Err(CscmError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            q_cv.dims(),
            q_sv.dims()
        )));
    }
    let (cv, sv) = (&q_cv.0, &q_sv.0);
    let (mut s_cv, mut s_sv, mut n) = (0.0f64, 0.0f64, 0usize);
    for idx in 0..cv.pixel_count() {
        if cv.is_valid_at(idx) && sv.is_valid_at(idx) {
            s_cv += cv.data()[idx] as f64;
            s_sv += sv.data()[idx] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CscmError::NoOverlap);
    }
    let ratio = (s_cv / n as f64) / (s_sv / n as f64).max(1e-6);
    let (h, w) = cv.dims();
    let mut out = RasterF32::zeros(h, w, 1);
    let mut mask = vec![false; h * w];
    for (idx, ok) in mask.iter_mut().enumerate() {
        if cv.is_valid_at(idx) {
            out.data_mut()[idx] = cv.data()[idx];
            *ok = true;
        } else if sv.is_valid_at(idx) {
            out.data_mut()[idx] = (ratio * sv.data()[idx] as f64).clamp(0.0, 1.0) as f32;
            *ok = true;
        }
    }
    if cv.mask().is_none() {
        out.clear_mask();
        return Ok(ConfidenceMap(out));
    }
    Ok(ConfidenceMap(out.with_mask(mask)?))
}

/// Stable iff the confidence is at least `tau` or undefined.
pub fn binarize(q: &ConfidenceMap, tau: f32) -> Result<TransientMask, CscmError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CscmError::BadThreshold(tau));
    }
    let r = &q.0;
    let stable = (0..r.pixel_count())
        .map(|i| !r.is_valid_at(i) || r.data()[i] >= tau)
        .collect();
    Ok(TransientMask {
        height: r.height(),
        width: r.width(),
        stable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: &[f32], valid: &[bool]) -> ConfidenceMap {
        ConfidenceMap(
            RasterF32::from_vec(1, values.len(), 1, values.to_vec())
                .unwrap()
                .with_mask(valid.to_vec())
                .unwrap(),
        )
    }

    #[test]
    fn formula_values() {
        let cases = [(1.0, 1.0), (0.75, 0.5), (0.5, 0.0), (0.0, 0.0), (-1.0, 0.0)];
        for (c, q) in cases {
            assert_eq!(confidence_from_cosine(c), q);
        }
    }

    #[test]
    fn identical_features_full_confidence() {
        let f = RasterF32::from_fn(4, 4, 3, |r, c, k| (r + 2 * c + k) as f32 + 0.5);
        let q = cross_view_confidence(&f, &f).unwrap();
        assert!(q.0.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let q = self_view_confidence(&f, &f).unwrap();
        assert!(q.0.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn orthogonal_features_zero() {
        let a = RasterF32::from_fn(2, 2, 2, |_, _, k| if k == 0 { 1.0 } else { 0.0 });
        let b = RasterF32::from_fn(2, 2, 2, |_, _, k| if k == 1 { 3.0 } else { 0.0 });
        let q = self_view_confidence(&a, &b).unwrap();
        assert!(q.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_view_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = RasterF32::from_fn(5, 5, 6, |_, _, _| rng.random_range(-1.0..1.0));
        let b = RasterF32::from_fn(5, 5, 6, |_, _, _| rng.random_range(-1.0..1.0));
        let q = self_view_confidence(&a, &b).unwrap();
        for idx in 0..25 {
            let (x, y) = (a.pixel(idx), b.pixel(idx));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum();
            let nx: f64 = x.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
            let want = (2.0 * dot / (nx * ny) - 1.0).max(0.0);
            assert!((q.0.data()[idx] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_invalidity_propagates() {
        let a = RasterF32::filled(2, 2, 2, 1.0);
        let mut b = a.clone();
        b.set_valid(0, 1, false);
        let q = cross_view_confidence(&a, &b).unwrap();
        assert!(!q.0.is_valid(0, 1));
        assert!(q.0.is_valid(1, 1));
    }

    #[test]
    fn fully_valid_cross_view_passes_through() {
        let cv = ConfidenceMap(RasterF32::from_fn(3, 3, 1, |r, c, _| (r * 3 + c) as f32 / 9.0));
        let sv = ConfidenceMap(RasterF32::filled(3, 3, 1, 0.1));
        let fused = calibrate_and_fuse(&cv, &sv).unwrap();
        assert_eq!(fused, cv);
        // idempotent
        assert_eq!(calibrate_and_fuse(&fused, &sv).unwrap(), fused);
    }

    #[test]
    fn unit_ratio_fill() {
        let vals = [0.9, 0.4, 0.7, 0.3];
        let cv = map(&vals, &[true, true, false, false]);
        let sv = map(&vals, &[true, true, true, true]);
        let fused = calibrate_and_fuse(&cv, &sv).unwrap();
        assert_eq!(fused.0.data(), &vals);
        assert_eq!(fused.0.valid_count(), 4);
    }

    #[test]
    fn ratio_two_fill() {
        // overlap means: cv 0.8, sv 0.4 -> ratio 2; hole gets 2 * 0.3
        let cv = map(&[0.8, 0.8, 0.0], &[true, true, false]);
        let sv = map(&[0.5, 0.3, 0.3], &[true, true, true]);
        let fused = calibrate_and_fuse(&cv, &sv).unwrap();
        assert!((fused.0.data()[2] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn fill_is_clamped_and_holes_stay_holes() {
        let cv = map(&[0.9, 0.0, 0.0], &[true, false, false]);
        let sv = map(&[0.1, 0.5, 0.0], &[true, true, false]);
        let fused = calibrate_and_fuse(&cv, &sv).unwrap();
        assert_eq!(fused.0.data()[1], 1.0);
        assert!(!fused.0.is_valid(0, 2));
    }

    #[test]
    fn no_overlap_is_an_error() {
        let cv = map(&[0.5, 0.0], &[true, false]);
        let sv = map(&[0.0, 0.5], &[false, true]);
        assert!(matches!(calibrate_and_fuse(&cv, &sv), Err(CscmError::NoOverlap)));
    }

    #[test]
    fn threshold_semantics() {
        let q = map(&[0.2, 0.19, 0.0, 0.7], &[true, true, false, true]);
        let m = binarize(&q, 0.2).unwrap();
        assert_eq!(m.stable, vec![true, false, true, true]);
        assert!(binarize(&q, 1.5).is_err());
        // tau = 0 disables masking
        assert_eq!(binarize(&q, 0.0).unwrap().transient_count(), 0);
    }

    #[test]
    fn source_mean_uses_valid_sources_only() {
        let a = map(&[1.0, 0.2, 0.0], &[true, true, false]);
        let b = map(&[0.0, 0.6, 0.0], &[true, false, false]);
        let m = mean_over_sources(&[a, b]).unwrap();
        assert_eq!(m.0.data()[..2], [0.5, 0.2]);
        assert!(!m.0.is_valid(0, 2));
    }

    #[test]
    fn mask_raster_round_trip() {
        let m = TransientMask {
            height: 1,
            width: 3,
            stable: vec![true, false, true],
        };
        assert_eq!(TransientMask::from_raster(&m.to_raster()), m);
    }

    proptest! {
        #[test]
        fn confidence_bounded_and_monotone(a in -1.0f32..1.0, b in -1.0f32..1.0) {
            let (qa, qb) = (confidence_from_cosine(a), confidence_from_cosine(b));
            prop_assert!((0.0..=1.0).contains(&qa));
            if a <= b {
                prop_assert!(qa <= qb);
            }
        }
    }
}
