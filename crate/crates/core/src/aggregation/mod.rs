//! Multi-view geometric consistency filtering of per-view height maps and
//! DSM rasterization.

mod dsm;

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{GeoPoint, PixelCoord};
use crate::raster::RasterF32;
use crate::rpc::{RpcError, RpcModel};

pub use dsm::{
    parse_dsm_sidecar, rasterize_dsm, rasterize_dsm_with, read_dsm, write_dsm, CellReduce,
    DsmGrid, GridSpec, DEFAULT_NODATA,
};

/// Heights whose magnitude is below this (meters) use an absolute rather
/// than a relative height test.
pub const DEGENERATE_HEIGHT_M: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("reprojection leaves the raster footprint")]
    OutOfFootprint,
    #[error("need at least 2 views, got {0}")]
    ViewCountTooSmall(usize),
    #[error("{0} height maps but {1} cameras")]
    ListMismatch(usize, usize),
    #[error("no points to rasterize")]
    EmptyPointSet,
    #[error("bad grid: {0}")]
    BadGrid(String),
    #[error("camera error: {0}")]
    Camera(#[from] RpcError),
    #[error("DSM I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliablePoint {
    pub geo: GeoPoint,
    pub source_view: usize,
    /// Reference-view pixel the point was lifted from.
    pub pixel: PixelCoord,
    pub n_agreeing: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub dp_max: f64,
    pub dh_max: f64,
    pub min_agree: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            dp_max: 3.0,
            dh_max: 0.2,
            min_agree: 1,
        }
    }
}

/// Outcome of the forward/backward reprojection of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    /// Reference-view pixel distance between `p` and its round trip `p'`.
    pub delta_p: f64,
    /// Relative height difference; with a near-zero reference height the
    /// denominator is pinned to [`DEGENERATE_HEIGHT_M`].
    pub delta_h: f64,
    pub degenerate: bool,
    /// Ground point lifted from the reference pixel.
    pub geo: GeoPoint,
}

fn sample_height(h: &RasterF32, p: PixelCoord) -> Option<f64> {
    let mut out = [0.0f32];
    h.sample_bilinear(p.u, p.v, &mut out).then_some(out[0] as f64)
}

/// Lifts `p` with the reference height, projects into the source view,
/// lifts again with the source height found there and projects back.
pub fn reproject_check(
    ref_rpc: &RpcModel,
    src_rpc: &RpcModel,
    h_ref: &RasterF32,
    h_src: &RasterF32,
    p: PixelCoord,
) -> Result<Reprojection, AggregationError> {
    let h_p = sample_height(h_ref, p).ok_or(AggregationError::OutOfFootprint)?;
    let x = ref_rpc.localize(p, h_p)?;
    reproject_from(ref_rpc, src_rpc, h_ref, h_src, p, h_p, x)
}

fn reproject_from(
    ref_rpc: &RpcModel,
    src_rpc: &RpcModel,
    h_ref: &RasterF32,
    h_src: &RasterF32,
    p: PixelCoord,
    h_p: f64,
    x: GeoPoint,
) -> Result<Reprojection, AggregationError> {
    let q = src_rpc.project(&x)?;
    let h_q = sample_height(h_src, q).ok_or(AggregationError::OutOfFootprint)?;
    let x_back = src_rpc.localize_from(q, h_q, Some((x.lat, x.lon)))?;
    let p_back = ref_rpc.project(&x_back)?;
    let h_back = sample_height(h_ref, p_back).ok_or(AggregationError::OutOfFootprint)?;
    let diff = (h_p - h_back).abs();
    let degenerate = h_p.abs() < DEGENERATE_HEIGHT_M;
    let delta_h = if degenerate {
        log::debug!("aggregation near-zero reference height {h_p:.3} m at ({:.1}, {:.1})", p.u, p.v);
        diff / DEGENERATE_HEIGHT_M
    } else {
        diff / h_p.abs()
    };
    Ok(Reprojection {
        delta_p: p.dist(&p_back),
        delta_h,
        degenerate,
        geo: x,
    })
}

fn check_lists(heightmaps: &[RasterF32], rpcs: &[RpcModel]) -> Result<(), AggregationError> {
    if heightmaps.len() != rpcs.len() {
        return Err(AggregationError::ListMismatch(heightmaps.len(), rpcs.len()));
    }
    if heightmaps.len() < 2 {
        return Err(AggregationError::ViewCountTooSmall(heightmaps.len()));
    }
    Ok(())
}

/// Keeps every valid pixel of every view whose reprojection through at
/// least `min_agree` other views passes both `δp < dp_max` and
/// `δh < dh_max`. Points are ordered by view, then row-major pixel.
pub fn consistency_filter(
    heightmaps: &[RasterF32],
    rpcs: &[RpcModel],
    params: &FilterParams,
) -> Result<Vec<ReliablePoint>, AggregationError> {
    check_lists(heightmaps, rpcs)?;
    let n = heightmaps.len();
    let mut points = Vec::new();
    for i in 0..n {
        let h_ref = &heightmaps[i];
        let rows: Vec<Vec<ReliablePoint>> = (0..h_ref.height())
            .into_par_iter()
            .map(|row| {
                let mut out = Vec::new();
                for col in 0..h_ref.width() {
                    if !h_ref.is_valid(row, col) {
                        continue;
                    }
                    let p = PixelCoord::new(col as f64, row as f64);
                    let h_p = h_ref.get(row, col, 0) as f64;
                    let Ok(x) = rpcs[i].localize(p, h_p) else {
                        continue;
                    };
                    let n_agreeing = (0..n)
                        .filter(|&j| j != i)
                        .filter(|&j| {
                            reproject_from(&rpcs[i], &rpcs[j], h_ref, &heightmaps[j], p, h_p, x)
                                .is_ok_and(|r| r.delta_p < params.dp_max && r.delta_h < params.dh_max)
                        })
                        .count();
                    if n_agreeing >= params.min_agree {
                        out.push(ReliablePoint {
                            geo: x,
                            source_view: i,
                            pixel: p,
                            n_agreeing,
                        });
                    }
                }
                out
            })
            .collect();
        points.extend(rows.into_iter().flatten());
    }
    Ok(points)
}

/// Every valid pixel of every view lifted to 3D without any consistency
/// check (the "w/o C.A." ablation).
pub fn lift_all(
    heightmaps: &[RasterF32],
    rpcs: &[RpcModel],
) -> Result<Vec<ReliablePoint>, AggregationError> {
    if heightmaps.len() != rpcs.len() {
        return Err(AggregationError::ListMismatch(heightmaps.len(), rpcs.len()));
    }
    let mut points = Vec::new();
    for (i, (h, rpc)) in heightmaps.iter().zip(rpcs).enumerate() {
        let rows: Vec<Vec<ReliablePoint>> = (0..h.height())
            .into_par_iter()
            .map(|row| {
                (0..h.width())
                    .filter(|&col| h.is_valid(row, col))
                    .filter_map(|col| {
                        let p = PixelCoord::new(col as f64, row as f64);
                        let geo = rpc.localize(p, h.get(row, col, 0) as f64).ok()?;
                        Some(ReliablePoint {
                            geo,
                            source_view: i,
                            pixel: p,
                            n_agreeing: 0,
                        })
                    })
                    .collect()
            })
            .collect();
        points.extend(rows.into_iter().flatten());
    }
    Ok(points)
}

/// Writes one `lat lon hei n_agree` line per point.
pub fn write_points(points: &[ReliablePoint], mut w: impl Write) -> std::io::Result<()> {
    for p in points {
        writeln!(w, "{} {} {} {}", p.geo.lat, p.geo.lon, p.geo.hei, p.n_agreeing)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpc::test_models::{identity_like, warped};

    fn flat(h: f32) -> RasterF32 {
        RasterF32::filled(40, 40, 1, h)
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let rpc = warped();
        let h = RasterF32::from_fn(40, 40, 1, |r, c, _| 30.0 + (r + c) as f32 * 0.5);
        let r = reproject_check(&rpc, &rpc, &h, &h, PixelCoord::new(12.0, 17.0)).unwrap();
        assert!(r.delta_p < 1e-9, "{}", r.delta_p);
        assert!(r.delta_h < 1e-9);
        assert!(!r.degenerate);
    }

    #[test]
    fn out_of_footprint() {
        let rpc = identity_like();
        let h = flat(50.0);
        let err = reproject_check(&rpc, &rpc, &h, &h, PixelCoord::new(45.0, 3.0)).unwrap_err();
        assert!(matches!(err, AggregationError::OutOfFootprint));
    }

    #[test]
    fn degenerate_height_uses_absolute_scale() {
        let rpc = identity_like();
        let h = RasterF32::from_fn(40, 40, 1, |_, c, _| if c < 20 { 0.1 } else { 0.3 });
        // identity camera: p' = p, so the difference is zero regardless
        let r = reproject_check(&rpc, &rpc, &h, &h, PixelCoord::new(5.0, 5.0)).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.delta_h, 0.0);
    }

    #[test]
    fn filter_rejects_too_few_views() {
        let err = consistency_filter(&[flat(1.0)], &[identity_like()], &FilterParams::default());
        assert!(matches!(err, Err(AggregationError::ViewCountTooSmall(1))));
    }

    #[test]
    fn vacuous_thresholds_keep_every_footprint_pixel() {
        let rpcs = [identity_like(), identity_like()];
        let hs = [flat(50.0), flat(50.0)];
        let params = FilterParams {
            dp_max: f64::INFINITY,
            dh_max: f64::INFINITY,
            min_agree: 1,
        };
        let pts = consistency_filter(&hs, &rpcs, &params).unwrap();
        assert_eq!(pts.len(), 2 * 1600);
        assert!(pts.iter().all(|p| p.n_agreeing == 1));
    }

    #[test]
    fn lift_all_counts_valid_pixels() {
        let mut a = flat(10.0);
        a.set_valid(0, 0, false);
        let pts = lift_all(&[a, flat(10.0)], &[identity_like(), warped()]).unwrap();
        assert_eq!(pts.len(), 3199);
    }

    #[test]
    fn points_text_format() {
        let p = ReliablePoint {
            geo: GeoPoint::new(35.5, 139.25, 12.5),
            source_view: 0,
            pixel: PixelCoord::new(0.0, 0.0),
            n_agreeing: 2,
        };
        let mut buf = Vec::new();
        write_points(&[p], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "35.5 139.25 12.5 2\n");
    }
}
