//! Height-sweep stereo: RPC-guided warping of source features into the
//! reference view, variance matching cost, optional box aggregation and
//! soft-argmin height regression.

use rayon::prelude::*;
use thiserror::Error;

use crate::geo::PixelCoord;
use crate::raster::RasterF32;
use crate::rpc::{RpcError, RpcModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostVolumeError {
    #[error("bad height range [{h_min}, {h_max}] with {count} samples")]
    BadRange { h_min: f64, h_max: f64, count: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no source views")]
    EmptySourceSet,
    #[error("camera error: {0}")]
    Camera(#[from] RpcError),
}

/// Uniformly spaced height candidates, endpoints inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightHypotheses {
    pub h_min: f64,
    pub h_max: f64,
    values: Vec<f64>,
}

impl HeightHypotheses {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn spacing(&self) -> f64 {
        (self.h_max - self.h_min) / (self.values.len() - 1) as f64
    }
}

pub fn sample_heights(h_min: f64, h_max: f64, m: usize) -> Result<HeightHypotheses, CostVolumeError> {
    if m < 2 || !h_min.is_finite() || !h_max.is_finite() || h_min >= h_max {
        return Err(CostVolumeError::BadRange {
            h_min,
            h_max,
            count: m,
        });
    }
    let step = (h_max - h_min) / (m - 1) as f64;
    let mut values: Vec<f64> = (0..m).map(|k| h_min + step * k as f64).collect();
    values[m - 1] = h_max;
    Ok(HeightHypotheses {
        h_min,
        h_max,
        values,
    })
}

/// Per-pixel, per-hypothesis matching cost. Layout is `H × W × M` with the
/// hypothesis index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub height: usize,
    pub width: usize,
    pub hypotheses: HeightHypotheses,
    pub cost: Vec<f32>,
    pub valid: Vec<bool>,
}

impl CostVolume {
    #[inline]
    pub fn at(&self, row: usize, col: usize, m: usize) -> (f32, bool) {
        let i = (row * self.width + col) * self.hypotheses.count() + m;
        (self.cost[i], self.valid[i])
    }

    /// One hypothesis slice as a single-channel raster (debug dumps).
    pub fn slice(&self, m: usize) -> RasterF32 {
        let mc = self.hypotheses.count();
        let n = self.height * self.width;
        let data: Vec<f32> = (0..n).map(|i| self.cost[i * mc + m]).collect();
        let mask: Vec<bool> = (0..n).map(|i| self.valid[i * mc + m]).collect();
        RasterF32::from_vec(self.height, self.width, 1, data)
            .and_then(|r| r.with_mask(mask))
            .expect("slice dimensions match volume")
    }
}

fn check_cameras(a: &RpcModel, b: &RpcModel) -> Result<(), CostVolumeError> {
    for rpc in [a, b] {
        if let Err(e @ RpcError::NonFinite) = rpc.validate() {
            return Err(e.into());
        }
    }
    Ok(())
}

/// Warps `src_feat` into the reference view assuming every reference pixel
/// lies at height `h`. Pixels whose ground point misses the source raster,
/// lands on invalid source pixels, or fails to localize are invalid.
pub fn warp_to_ref(
    ref_rpc: &RpcModel,
    src_rpc: &RpcModel,
    src_feat: &RasterF32,
    h: f64,
    ref_dims: (usize, usize),
) -> Result<RasterF32, CostVolumeError> {
    check_cameras(ref_rpc, src_rpc)?;
    Ok(warp_impl(ref_rpc, src_rpc, src_feat, ref_dims, |_, _| Some(h)))
}

/// Like [`warp_to_ref`] with a per-pixel height raster in the reference
/// view. Invalid heights give invalid output pixels.
pub fn warp_with_heights(
    ref_rpc: &RpcModel,
    src_rpc: &RpcModel,
    src_feat: &RasterF32,
    heights: &RasterF32,
) -> Result<RasterF32, CostVolumeError> {
    check_cameras(ref_rpc, src_rpc)?;
    Ok(warp_impl(ref_rpc, src_rpc, src_feat, heights.dims(), |r, c| {
        heights
            .is_valid(r, c)
            .then(|| heights.get(r, c, 0) as f64)
            .filter(|h| h.is_finite())
    }))
}

fn warp_impl(
    ref_rpc: &RpcModel,
    src_rpc: &RpcModel,
    src_feat: &RasterF32,
    (h, w): (usize, usize),
    height_at: impl Fn(usize, usize) -> Option<f64> + Sync,
) -> RasterF32 {
    let c = src_feat.channels();
    let mut out = RasterF32::zeros(h, w, c);
    let mut mask = vec![false; h * w];
    out.data_mut()
        .par_chunks_mut(w * c)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (data_row, mask_row))| {
            let mut guess = None;
            for col in 0..w {
                let Some(hh) = height_at(row, col) else {
                    continue;
                };
                let px = PixelCoord::new(col as f64, row as f64);
                let Ok(g) = ref_rpc.localize_from(px, hh, guess) else {
                    continue;
                };
                guess = Some((g.lat, g.lon));
                let Ok(q) = src_rpc.project(&g) else {
                    continue;
                };
                mask_row[col] =
                    src_feat.sample_bilinear(q.u, q.v, &mut data_row[col * c..(col + 1) * c]);
            }
        });
    out.with_mask(mask).expect("mask sized to raster")
}

/// Variance cost of one hypothesis slice: for each pixel the population
/// variance across the valid views (reference first), averaged over
/// channels. Valid where at least two views are valid.
pub fn variance_slice(
    ref_feat: &RasterF32,
    warped: &[RasterF32],
) -> Result<(Vec<f32>, Vec<bool>), CostVolumeError> {
    if warped.is_empty() {
        return Err(CostVolumeError::EmptySourceSet);
    }
    if let Some(bad) = warped.iter().find(|r| !r.same_shape(ref_feat)) {
        return Err(CostVolumeError::ShapeMismatch(format!(
            "reference {}x{}x{}, warped {}x{}x{}",
            ref_feat.height(),
            ref_feat.width(),
            ref_feat.channels(),
            bad.height(),
            bad.width(),
            bad.channels()
        )));
    }
    let n = ref_feat.pixel_count();
    let c = ref_feat.channels();
    let mut cost = vec![0.0f32; n];
    let mut valid = vec![false; n];
    cost.par_iter_mut()
        .zip(valid.par_iter_mut())
        .enumerate()
        .for_each(|(idx, (cst, ok))| {
            let views = || {
                std::iter::once(ref_feat)
                    .chain(warped.iter())
                    .filter(move |r| r.is_valid_at(idx))
                    .map(move |r| r.pixel(idx))
            };
            let count = views().count();
            if count < 2 {
                return;
            }
            let k = count as f64;
            let mut total = 0.0f64;
            for ch in 0..c {
                let mean = views().map(|v| v[ch] as f64).sum::<f64>() / k;
                total += views()
                    .map(|v| {
                        let d = v[ch] as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / k;
            }
            *cst = (total / c as f64) as f32;
            *ok = true;
        });
    Ok((cost, valid))
}

/// Assembles a cost volume from materialized warps, indexed
/// `warped[hypothesis][source]`.
pub fn build_variance_cost(
    ref_feat: &RasterF32,
    warped: &[Vec<RasterF32>],
    hypotheses: &HeightHypotheses,
) -> Result<CostVolume, CostVolumeError> {
    if warped.len() != hypotheses.count() {
        return Err(CostVolumeError::ShapeMismatch(format!(
            "{} warped slices for {} hypotheses",
            warped.len(),
            hypotheses.count()
        )));
    }
    let slices = warped
        .iter()
        .map(|views| variance_slice(ref_feat, views))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(ref_feat.dims(), hypotheses, slices))
}

/// Full height sweep for one reference view. Warps are produced one
/// hypothesis at a time and dropped once their cost slice is computed.
pub fn plane_sweep(
    ref_rpc: &RpcModel,
    ref_feat: &RasterF32,
    sources: &[(&RpcModel, &RasterF32)],
    hypotheses: &HeightHypotheses,
) -> Result<CostVolume, CostVolumeError> {
    if sources.is_empty() {
        return Err(CostVolumeError::EmptySourceSet);
    }
    for (rpc, _) in sources {
        check_cameras(ref_rpc, rpc)?;
    }
    let dims = ref_feat.dims();
    let slices = hypotheses
        .values()
        .par_iter()
        .map(|&h| {
            let warped: Vec<RasterF32> = sources
                .iter()
                .map(|(rpc, feat)| warp_impl(ref_rpc, rpc, feat, dims, |_, _| Some(h)))
                .collect();
            variance_slice(ref_feat, &warped)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(dims, hypotheses, slices))
}

fn assemble(
    (h, w): (usize, usize),
    hypotheses: &HeightHypotheses,
    slices: Vec<(Vec<f32>, Vec<bool>)>,
) -> CostVolume {
    let m = hypotheses.count();
    let mut cost = vec![0.0f32; h * w * m];
    let mut valid = vec![false; h * w * m];
    cost.par_chunks_mut(m)
        .zip(valid.par_chunks_mut(m))
        .enumerate()
        .for_each(|(idx, (c, v))| {
            for (k, (sc, sv)) in slices.iter().enumerate() {
                c[k] = sc[idx];
                v[k] = sv[idx];
            }
        });
    CostVolume {
        height: h,
        width: w,
        hypotheses: hypotheses.clone(),
        cost,
        valid,
    }
}

/// Separable box filter over each hypothesis slice. Invalid samples are left
/// out of every average; a pixel's own validity is unchanged.
pub fn regularize(cv: &CostVolume, radius: usize) -> CostVolume {
    if radius == 0 {
        return cv.clone();
    }
    let (h, w, m) = (cv.height, cv.width, cv.hypotheses.count());
    let r = radius as isize;
    let filtered: Vec<Vec<f32>> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut sum = vec![0.0f64; h * w];
            let mut cnt = vec![0.0f64; h * w];
            // horizontal
            for row in 0..h {
                for col in 0..w {
                    let (mut s, mut n) = (0.0, 0.0);
                    for dc in -r..=r {
                        let cc = col as isize + dc;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let i = (row * w + cc as usize) * m + k;
                        if cv.valid[i] {
                            s += cv.cost[i] as f64;
                            n += 1.0;
                        }
                    }
                    sum[row * w + col] = s;
                    cnt[row * w + col] = n;
                }
            }
            // vertical
            let mut out = vec![0.0f32; h * w];
            for row in 0..h {
                for col in 0..w {
                    let i = (row * w + col) * m + k;
                    if !cv.valid[i] {
                        out[row * w + col] = cv.cost[i];
                        continue;
                    }
                    let (mut s, mut n) = (0.0, 0.0);
                    for dr in -r..=r {
                        let rr = row as isize + dr;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        s += sum[rr as usize * w + col];
                        n += cnt[rr as usize * w + col];
                    }
                    out[row * w + col] = (s / n) as f32;
                }
            }
            out
        })
        .collect();
    let mut out = cv.clone();
    for (k, slice) in filtered.iter().enumerate() {
        for (idx, v) in slice.iter().enumerate() {
            out.cost[idx * m + k] = *v;
        }
    }
    out
}

/// Soft-argmin height regression: per pixel, softmax of `-cost/temperature`
/// over the valid hypotheses, then the weighted mean height.
pub fn soft_argmin(cv: &CostVolume, temperature: f64) -> RasterF32 {
    assert!(temperature > 0.0, "temperature must be positive");
    let m = cv.hypotheses.count();
    let heights = cv.hypotheses.values();
    let n = cv.height * cv.width;
    let mut data = vec![0.0f32; n];
    let mut mask = vec![false; n];
    data.par_iter_mut()
        .zip(mask.par_iter_mut())
        .enumerate()
        .for_each(|(idx, (out, ok))| {
            let costs = &cv.cost[idx * m..(idx + 1) * m];
            let valid = &cv.valid[idx * m..(idx + 1) * m];
            let Some(min) = costs
                .iter()
                .zip(valid)
                .filter(|(_, v)| **v)
                .map(|(c, _)| *c as f64)
                .min_by(f64::total_cmp)
            else {
                return;
            };
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for k in 0..m {
                if !valid[k] {
                    continue;
                }
                let wgt = (-(costs[k] as f64 - min) / temperature).exp();
                num += wgt * heights[k];
                den += wgt;
            }
            let hgt = (num / den).clamp(cv.hypotheses.h_min, cv.hypotheses.h_max);
            *out = hgt as f32;
            *ok = true;
        });
    RasterF32::from_vec(cv.height, cv.width, 1, data)
        .and_then(|r| r.with_mask(mask))
        .expect("dimensions match volume")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpc::test_models::warped as warped_rpc;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume_from(costs: &[f32], heights: &[f64]) -> CostVolume {
        let hyps = HeightHypotheses {
            h_min: heights[0],
            h_max: *heights.last().unwrap(),
            values: heights.to_vec(),
        };
        CostVolume {
            height: 1,
            width: 1,
            hypotheses: hyps,
            cost: costs.to_vec(),
            valid: vec![true; costs.len()],
        }
    }

    #[test]
    fn unit_spacing_hypotheses() {
        let h = sample_heights(0.0, 63.0, 64).unwrap();
        assert_eq!(h.spacing(), 1.0);
        for (k, v) in h.values().iter().enumerate() {
            assert_eq!(*v, k as f64);
        }
    }

    #[test]
    fn endpoints_exact() {
        let h = sample_heights(-20.0, 80.0, 64).unwrap();
        assert_eq!(h.count(), 64);
        assert_eq!(h.values()[0], -20.0);
        assert_eq!(h.values()[63], 80.0);
        assert!(h.values().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bad_ranges() {
        assert!(matches!(
            sample_heights(5.0, 5.0, 64),
            Err(CostVolumeError::BadRange { .. })
        ));
        assert!(sample_heights(0.0, 1.0, 1).is_err());
        assert!(sample_heights(2.0, 1.0, 4).is_err());
    }

    #[test]
    fn identity_warp_reproduces_interior() {
        let rpc = warped_rpc();
        let feat = RasterF32::from_fn(40, 48, 2, |r, c, k| ((r * 3 + c * 5 + k) as f32 * 0.1).sin());
        let out = warp_to_ref(&rpc, &rpc, &feat, 70.0, (40, 48)).unwrap();
        for r in 1..39 {
            for c in 1..47 {
                assert!(out.is_valid(r, c));
                for k in 0..2 {
                    assert!((out.get(r, c, k) - feat.get(r, c, k)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn warp_outside_footprint_is_invalid() {
        let rpc = warped_rpc();
        let mut far = rpc.clone();
        far.samp_off += 1e5;
        let feat = RasterF32::filled(16, 16, 1, 1.0);
        let out = warp_to_ref(&rpc, &far, &feat, 50.0, (16, 16)).unwrap();
        assert_eq!(out.valid_count(), 0);
    }

    #[test]
    fn warp_rejects_non_finite_camera() {
        let rpc = warped_rpc();
        let mut bad = rpc.clone();
        bad.line_num[2] = f64::NAN;
        let feat = RasterF32::filled(4, 4, 1, 1.0);
        assert!(matches!(
            warp_to_ref(&rpc, &bad, &feat, 0.0, (4, 4)),
            Err(CostVolumeError::Camera(RpcError::NonFinite))
        ));
    }

    #[test]
    fn identical_views_cost_nothing() {
        let f = RasterF32::from_fn(5, 5, 3, |r, c, k| (r + c * k) as f32);
        let (cost, valid) = variance_slice(&f, &[f.clone(), f.clone()]).unwrap();
        assert!(cost.iter().all(|&c| c == 0.0));
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn two_view_variance_is_half_gap_squared() {
        let x = RasterF32::from_fn(3, 3, 2, |r, c, k| (r * 3 + c + k) as f32);
        let c = 1.5f32;
        let y = x.clone().map_in_place(|v| v + 2.0 * c);
        let (cost, _) = variance_slice(&x, &[y]).unwrap();
        for v in cost {
            assert!((v - c * c).abs() < 1e-6);
        }
    }

    #[test]
    fn variance_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mk = |rng: &mut ChaCha8Rng| {
            let mut r = RasterF32::from_fn(8, 8, 4, |_, _, _| rng.random_range(-2.0..2.0));
            for _ in 0..6 {
                let (a, b) = (rng.random_range(0..8), rng.random_range(0..8));
                r.set_valid(a, b, false);
            }
            r
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let (cost, valid) = variance_slice(&a, &[b.clone(), c.clone()]).unwrap();
        for idx in 0..64 {
            let views: Vec<&RasterF32> = [&a, &b, &c].into_iter().filter(|r| r.is_valid_at(idx)).collect();
            assert_eq!(valid[idx], views.len() >= 2);
            if views.len() < 2 {
                continue;
            }
            let mut acc = 0.0;
            for ch in 0..4 {
                let vals: Vec<f64> = views.iter().map(|r| r.data()[idx * 4 + ch] as f64).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                acc += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            }
            assert!((cost[idx] as f64 - acc / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn variance_errors() {
        let a = RasterF32::zeros(2, 2, 1);
        assert!(matches!(variance_slice(&a, &[]), Err(CostVolumeError::EmptySourceSet)));
        assert!(matches!(
            variance_slice(&a, &[RasterF32::zeros(2, 3, 1)]),
            Err(CostVolumeError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn build_volume_layout() {
        let hyps = sample_heights(0.0, 1.0, 2).unwrap();
        let a = RasterF32::filled(2, 2, 1, 0.0);
        let b = RasterF32::filled(2, 2, 1, 2.0);
        let cv = build_variance_cost(&a, &[vec![a.clone()], vec![b]], &hyps).unwrap();
        assert_eq!(cv.at(1, 1, 0), (0.0, true));
        assert_eq!(cv.at(1, 1, 1), (1.0, true));
        assert!(build_variance_cost(&a, &[vec![a.clone()]], &hyps).is_err());
    }

    fn random_volume(seed: u64, h: usize, w: usize, m: usize) -> CostVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyps = sample_heights(0.0, 10.0, m).unwrap();
        CostVolume {
            height: h,
            width: w,
            hypotheses: hyps,
            cost: (0..h * w * m).map(|_| rng.random_range(0.0..3.0)).collect(),
            valid: (0..h * w * m).map(|_| rng.random_bool(0.8)).collect(),
        }
    }

    #[test]
    fn zero_radius_is_identity() {
        let cv = random_volume(4, 5, 6, 3);
        assert_eq!(regularize(&cv, 0), cv);
    }

    #[test]
    fn constant_slice_unchanged() {
        let mut cv = random_volume(5, 6, 6, 2);
        cv.cost.iter_mut().for_each(|c| *c = 0.75);
        let out = regularize(&cv, 2);
        assert!(out.cost.iter().all(|&c| c == 0.75));
    }

    #[test]
    fn box_filter_matches_masked_mean() {
        let cv = random_volume(6, 9, 9, 2);
        let out = regularize(&cv, 1);
        let m = 2;
        for r in 0..9isize {
            for c in 0..9isize {
                let i = (r * 9 + c) as usize * m;
                if !cv.valid[i] {
                    assert_eq!(out.cost[i], cv.cost[i]);
                    continue;
                }
                let (mut s, mut n) = (0.0f64, 0usize);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if (0..9).contains(&rr) && (0..9).contains(&cc) {
                            let j = (rr * 9 + cc) as usize * m;
                            if cv.valid[j] {
                                s += cv.cost[j] as f64;
                                n += 1;
                            }
                        }
                    }
                }
                assert!((out.cost[i] as f64 - s / n as f64).abs() < 1e-6);
            }
        }
        assert_eq!(out.valid, cv.valid);
    }

    #[test]
    fn soft_argmin_saturates() {
        let heights: Vec<f64> = (0..8).map(|k| k as f64 * 2.5).collect();
        let mut costs = vec![1e6f32; 8];
        costs[5] = 0.0;
        let h = soft_argmin(&volume_from(&costs, &heights), 1.0);
        assert!((h.data()[0] as f64 - 12.5).abs() < 1e-4);
    }

    #[test]
    fn uniform_costs_give_midpoint() {
        let heights = sample_heights(-4.0, 20.0, 9).unwrap().values().to_vec();
        let h = soft_argmin(&volume_from(&[0.3; 9], &heights), 1.0);
        assert!((h.data()[0] - 8.0).abs() < 1e-5);
    }

    #[test]
    fn symmetric_and_asymmetric_three_point() {
        let heights = [0.0, 10.0, 20.0];
        let h = soft_argmin(&volume_from(&[4.0, 0.0, 4.0], &heights), 2.0);
        assert_eq!(h.data()[0], 10.0);

        let h = soft_argmin(&volume_from(&[4.0, 0.0, 8.0], &heights), 2.0);
        let w: Vec<f64> = [4.0f64, 0.0, 8.0].iter().map(|c| (-c / 2.0).exp()).collect();
        let want = (w[0] * 0.0 + w[1] * 10.0 + w[2] * 20.0) / w.iter().sum::<f64>();
        assert!((h.data()[0] as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn no_valid_hypothesis_is_invalid_pixel() {
        let mut cv = volume_from(&[1.0, 2.0], &[0.0, 1.0]);
        cv.valid = vec![false, false];
        let h = soft_argmin(&cv, 1.0);
        assert!(!h.is_valid(0, 0));
    }

    proptest! {
        #[test]
        fn soft_argmin_in_range_and_shift_invariant(
            costs in proptest::collection::vec(0.0f32..50.0, 6),
            shift in -20.0f32..20.0,
            t in 0.05f64..5.0,
        ) {
            let heights: Vec<f64> = (0..6).map(|k| -3.0 + 1.7 * k as f64).collect();
            let a = soft_argmin(&volume_from(&costs, &heights), t).data()[0];
            prop_assert!((heights[0] as f32..=heights[5] as f32).contains(&a));
            let shifted: Vec<f32> = costs.iter().map(|c| c + shift).collect();
            let b = soft_argmin(&volume_from(&shifted, &heights), t).data()[0];
            prop_assert!((a - b).abs() < 1e-3);
        }

        #[test]
        fn low_temperature_picks_argmin(costs in proptest::collection::vec(0.0f32..5.0, 7)) {
            let mut sorted = costs.clone();
            sorted.sort_by(f32::total_cmp);
            prop_assume!(sorted[1] - sorted[0] > 0.1);
            let heights: Vec<f64> = (0..7).map(|k| k as f64).collect();
            let arg = costs.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let h = soft_argmin(&volume_from(&costs, &heights), 1e-3).data()[0];
            prop_assert!((h as f64 - heights[arg]).abs() < 1e-4);
        }
    }
}
