//! In-memory reconstruction pipeline: features, per-view height sweep,
//! transient masking, consistency aggregation and DSM rasterization.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    consistency_filter, lift_all, rasterize_dsm, reproject_check, DsmGrid, FilterParams, GridSpec,
    ReliablePoint,
};
use crate::cost_volume::{plane_sweep, regularize, sample_heights, soft_argmin, warp_with_heights};
use crate::cscm::{
    binarize, calibrate_and_fuse, cross_view_confidence, mean_over_sources, self_view_confidence,
    ConfidenceMap, CscmError, TransientMask,
};
use crate::features::{box_smooth, extract_builtin, FeatureKind};
use crate::gaussians::{lift_heights, render, GaussianSet, LiftAttrs, RenderCamera, RenderOptions};
use crate::geo::PixelCoord;
use crate::losses::{masked_photometric, pearson_height_loss, weighted_total_loss, LossReport};
use crate::metrics::{dsm_metrics, DsmReport};
use crate::raster::RasterF32;
use crate::rpc::{fit_pinhole, PixelRect, RpcModel};

pub const LABEL_FULL: &str = "SkySplat";
pub const LABEL_NO_AGGREGATION: &str = "SkySplat w/o C.A.";

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

fn stage_err(stage: &'static str) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError { stage, message }
}

/// One input view. Optional rasters replace built-in computations.
#[derive(Debug, Clone)]
pub struct ViewData {
    pub image: RasterF32,
    pub rpc: RpcModel,
    /// Externally computed feature raster, same size as the image.
    pub features: Option<RasterF32>,
    /// Relative (scale-free) height prior for the Pearson height loss.
    pub rel_height: Option<RasterF32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub h_min: f64,
    pub h_max: f64,
    /// Number of height hypotheses.
    pub m: usize,
    pub feature_kind: FeatureKind,
    pub cscm_enabled: bool,
    /// Built-in features behind the confidence maps.
    pub cscm_feature_kind: FeatureKind,
    /// Box radius applied to confidence features before the cosine, pixels.
    pub cscm_smoothing: usize,
    pub tau: f32,
    pub temperature: f64,
    /// Box aggregation radius of the cost volume, pixels.
    pub cost_radius: usize,
    pub dp_max: f64,
    pub dh_max: f64,
    pub min_agree: usize,
    pub no_aggregation: bool,
    pub dsm_cell_size: f64,
    /// Explicit DSM grid; defaults to the bounding box of the points.
    pub dsm_grid: Option<GridSpec>,
    pub hei_weight: f64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            h_min: 0.0,
            h_max: 100.0,
            m: 64,
            feature_kind: FeatureKind::default(),
            cscm_enabled: true,
            cscm_feature_kind: FeatureKind::RgbGradCensus,
            cscm_smoothing: 2,
            tau: 0.2,
            temperature: DEFAULT_TEMPERATURE,
            cost_radius: 4,
            dp_max: 3.0,
            dh_max: 0.2,
            min_agree: 1,
            no_aggregation: false,
            dsm_cell_size: 0.5,
            dsm_grid: None,
            hei_weight: 1.0,
        }
    }
}

/// Rendered pixels with less opacity than this carry no self-view evidence.
const MIN_COVERAGE: f32 = 0.1;

/// Soft-argmin temperature for variance costs of standardized features.
pub const DEFAULT_TEMPERATURE: f64 = 0.002;

impl PipelineParams {
    pub fn filter_params(&self) -> FilterParams {
        FilterParams {
            dp_max: self.dp_max,
            dh_max: self.dh_max,
            min_agree: self.min_agree,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub label: &'static str,
    pub heights: Vec<RasterF32>,
    pub confidences: Vec<ConfidenceMap>,
    pub masks: Vec<TransientMask>,
    pub points: Vec<ReliablePoint>,
    pub dsm: DsmGrid,
    pub losses: Vec<LossReport>,
    pub timings: Vec<StageTiming>,
}

struct Timer(Vec<StageTiming>);

impl Timer {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        let seconds = t.elapsed().as_secs_f64();
        log::info!("{stage} done in {seconds:.3} s");
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
        out
    }
}

/// Height map of every view by sweeping it against all the others.
pub fn estimate_heights(
    views: &[ViewData],
    feats: &[RasterF32],
    params: &PipelineParams,
) -> Result<Vec<RasterF32>, PipelineError> {
    let hyps = sample_heights(params.h_min, params.h_max, params.m)
        .map_err(|e| stage_err("cost_volume")(e.to_string()))?;
    (0..views.len())
        .map(|i| {
            let sources: Vec<(&RpcModel, &RasterF32)> = (0..views.len())
                .filter(|&j| j != i)
                .map(|j| (&views[j].rpc, &feats[j]))
                .collect();
            let cv = plane_sweep(&views[i].rpc, &feats[i], &sources, &hyps)
                .map_err(|e| stage_err("cost_volume")(format!("view {i}: {e}")))?;
            let cv = regularize(&cv, params.cost_radius);
            Ok(soft_argmin(&cv, params.temperature))
        })
        .collect()
}

/// Cross-view confidence of view `i` against every other view, kept only
/// where the pair passes the geometric consistency check.
fn cross_view(
    i: usize,
    views: &[ViewData],
    feats: &[RasterF32],
    heights: &[RasterF32],
    params: &PipelineParams,
) -> Result<ConfidenceMap, PipelineError> {
    let err = stage_err("cscm");
    let mut maps = Vec::new();
    for j in (0..views.len()).filter(|&j| j != i) {
        let warped = warp_with_heights(&views[i].rpc, &views[j].rpc, &feats[j], &heights[i])
            .map_err(|e| err(e.to_string()))?;
        let q = cross_view_confidence(&feats[i], &warped).map_err(|e| err(e.to_string()))?;
        let mut r = q.into_raster();
        let (h, w) = r.dims();
        for row in 0..h {
            for col in 0..w {
                if !r.is_valid(row, col) {
                    continue;
                }
                let p = PixelCoord::new(col as f64, row as f64);
                let ok = reproject_check(&views[i].rpc, &views[j].rpc, &heights[i], &heights[j], p)
                    .is_ok_and(|c| c.delta_p < params.dp_max && c.delta_h < params.dh_max);
                if !ok {
                    r.set_valid(row, col, false);
                }
            }
        }
        maps.push(ConfidenceMap(r));
    }
    mean_over_sources(&maps).map_err(|e| err(e.to_string()))
}

/// Renders the Gaussians lifted from every other view into view `i`.
fn render_from_sources(
    i: usize,
    views: &[ViewData],
    heights: &[RasterF32],
    params: &PipelineParams,
) -> Result<(RasterF32, RasterF32), PipelineError> {
    let err = stage_err("render");
    let mut set: Option<GaussianSet> = None;
    for j in (0..views.len()).filter(|&j| j != i) {
        let attrs = LiftAttrs {
            color: Some(&views[j].image),
            ..Default::default()
        };
        let s = lift_heights(&heights[j], &views[j].rpc, &attrs).map_err(|e| err(e.to_string()))?;
        match set.as_mut() {
            None => set = Some(s),
            Some(acc) => acc.extend_from(&s),
        }
    }
    let set = set.ok_or_else(|| err("no source views".into()))?;
    let (h, w) = views[i].image.dims();
    let cam = fit_pinhole(
        &views[i].rpc,
        PixelRect::of_raster(w, h),
        [params.h_min, params.h_max],
    )
    .map_err(|e| err(e.to_string()))?;
    let out = render(&set, &RenderCamera::Pinhole(&cam), (h, w), &RenderOptions::default())
        .map_err(|e| err(e.to_string()))?;
    Ok((out.image, out.opacity))
}

/// Built-in confidence features of one image.
pub fn cscm_features(image: &RasterF32, params: &PipelineParams) -> Result<RasterF32, PipelineError> {
    extract_builtin(image, params.cscm_feature_kind)
        .map(|f| box_smooth(&f, params.cscm_smoothing))
        .map_err(|e| stage_err("cscm")(e.to_string()))
}

/// Transient mask of view `i` from fused cross-view and self-view
/// confidence, `feats` being the confidence features of every view. Also
/// returns the fused map and the self-view rendering.
pub fn transient_mask(
    i: usize,
    views: &[ViewData],
    feats: &[RasterF32],
    heights: &[RasterF32],
    params: &PipelineParams,
) -> Result<(TransientMask, ConfidenceMap, RasterF32), PipelineError> {
    let err = stage_err("cscm");
    let q_cv = cross_view(i, views, feats, heights, params)?;
    let (rendered, opacity) = render_from_sources(i, views, heights, params)?;
    // un-premultiply against the black background; barely covered pixels drop out
    let mut rendered_masked = rendered.clone();
    for idx in 0..opacity.pixel_count() {
        let a = opacity.data()[idx];
        if a < MIN_COVERAGE {
            let (r, c) = (idx / opacity.width(), idx % opacity.width());
            rendered_masked.set_valid(r, c, false);
        } else {
            rendered_masked.pixel_mut(idx).iter_mut().for_each(|v| *v /= a);
        }
    }
    let f_ref = cscm_features(&views[i].image, params)?;
    let f_ren = cscm_features(&rendered_masked, params)?;
    let q_sv = self_view_confidence(&f_ref, &f_ren).map_err(|e| err(e.to_string()))?;
    let fused = match calibrate_and_fuse(&q_cv, &q_sv) {
        Ok(f) => f,
        Err(CscmError::NoOverlap) => {
            log::warn!("cscm view {i}: confidence maps share no pixel, using cross-view only");
            q_cv
        }
        Err(e) => return Err(err(e.to_string())),
    };
    let mask = binarize(&fused, params.tau).map_err(|e| err(e.to_string()))?;
    Ok((mask, fused, rendered))
}

/// Runs the whole reconstruction. `gt_dsm`, when given, is only used to
/// place the output grid.
pub fn run(
    views: &[ViewData],
    params: &PipelineParams,
    gt_dsm: Option<&DsmGrid>,
) -> Result<PipelineOutput, PipelineError> {
    if views.len() < 2 {
        return Err(PipelineError {
            stage: "config",
            message: format!("need at least 2 views, got {}", views.len()),
        });
    }
    let mut timer = Timer(Vec::new());

    let feats = timer.run("features", || {
        views
            .iter()
            .enumerate()
            .map(|(i, v)| match &v.features {
                Some(f) if f.same_dims(&v.image) => Ok(f.clone()),
                Some(_) => Err(stage_err("features")(format!("view {i}: feature raster size"))),
                None => extract_builtin(&v.image, params.feature_kind)
                    .map_err(|e| stage_err("features")(format!("view {i}: {e}"))),
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    let heights = timer.run("heights", || estimate_heights(views, &feats, params))?;

    let (masks, confidences, renders) = if params.cscm_enabled {
        timer.run("cscm", || {
            let cfeats = views
                .iter()
                .map(|v| match &v.features {
                    Some(f) => Ok(box_smooth(f, params.cscm_smoothing)),
                    None => cscm_features(&v.image, params),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut out = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..views.len() {
                let (m, q, r) = transient_mask(i, views, &cfeats, &heights, params)?;
                out.0.push(m);
                out.1.push(q);
                out.2.push(Some(r));
            }
            Ok::<_, PipelineError>(out)
        })?
    } else {
        (Vec::new(), Vec::new(), vec![None; views.len()])
    };

    let (label, points) = timer.run("aggregation", || {
        if params.no_aggregation {
            lift_all(&heights, &views.iter().map(|v| v.rpc.clone()).collect::<Vec<_>>())
                .map(|p| (LABEL_NO_AGGREGATION, p))
        } else {
            let rpcs: Vec<RpcModel> = views.iter().map(|v| v.rpc.clone()).collect();
            consistency_filter(&heights, &rpcs, &params.filter_params()).map(|p| (LABEL_FULL, p))
        }
        .map_err(|e| stage_err("aggregation")(e.to_string()))
    })?;

    let dsm = timer.run("dsm", || {
        let grid = match (params.dsm_grid, gt_dsm) {
            (Some(g), _) => g,
            (None, Some(gt)) => gt.spec,
            (None, None) => {
                let first = points.first().ok_or_else(|| stage_err("dsm")("no reliable points".into()))?;
                let origin = crate::geo::GeoPoint::new(first.geo.lat, first.geo.lon, 0.0);
                GridSpec::covering(&points, origin, params.dsm_cell_size)
                    .ok_or_else(|| stage_err("dsm")("no reliable points".into()))?
            }
        };
        rasterize_dsm(&points, &grid).map_err(|e| stage_err("dsm")(e.to_string()))
    })?;

    let losses = timer.run("losses", || {
        let mut out = Vec::new();
        for (i, v) in views.iter().enumerate() {
            let Some(rel) = &v.rel_height else { continue };
            let (r, l_hei, n) = pearson_height_loss(rel, &heights[i])
                .map_err(|e| stage_err("losses")(format!("view {i}: {e}")))?;
            let l_rgb = match (&renders[i], masks.get(i)) {
                (Some(render), Some(mask)) => masked_photometric(render, &v.image, mask).unwrap_or(0.0),
                _ => 0.0,
            };
            out.push(LossReport {
                hei_corr: r,
                l_hei,
                l_rgb_mse: l_rgb,
                l_total: weighted_total_loss(l_rgb, l_hei, params.hei_weight),
                n_pixels_used: n,
            });
        }
        Ok::<_, PipelineError>(out)
    })?;

    Ok(PipelineOutput {
        label,
        heights,
        confidences,
        masks,
        points,
        dsm,
        losses,
        timings: timer.0,
    })
}

/// Scores a pipeline DSM against ground truth.
pub fn score(out: &PipelineOutput, gt: &DsmGrid, exclude: Option<&[bool]>) -> Result<DsmReport, PipelineError> {
    dsm_metrics(&out.dsm, gt, exclude).map_err(|e| stage_err("metrics")(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, Relief, SceneSpec};

    fn views_of(spec: &SceneSpec) -> (Vec<ViewData>, crate::synthetic::SceneBundle) {
        let b = generate(spec).unwrap();
        let views = b
            .images
            .iter()
            .zip(&b.rpcs)
            .map(|(img, rpc)| ViewData {
                image: img.clone(),
                rpc: rpc.clone(),
                features: None,
                rel_height: None,
            })
            .collect();
        (views, b)
    }

    #[test]
    fn single_view_rejected() {
        let (views, _) = views_of(&SceneSpec {
            image_size: 32,
            extent: 8.0,
            relief: Relief::Flat { height: 5.0 },
            ..Default::default()
        });
        let err = run(&views[..1], &PipelineParams::default(), None).unwrap_err();
        assert_eq!(err.stage, "config");
    }

    #[test]
    fn small_ramp_reconstruction() {
        let spec = SceneSpec {
            image_size: 64,
            extent: 16.0,
            relief: Relief::Ramp {
                base: 10.0,
                slope_east: 0.2,
                slope_north: 0.1,
            },
            ..Default::default()
        };
        let (mut views, b) = views_of(&spec);
        views[0].rel_height = Some(b.gt_height[0].clone().map_in_place(|h| 3.0 * h - 7.0));
        let (lo, hi) = b.height_range();
        let params = PipelineParams {
            h_min: lo,
            h_max: hi,
            m: 32,
            ..Default::default()
        };
        let out = run(&views, &params, Some(&b.gt_dsm)).unwrap();
        assert_eq!(out.label, LABEL_FULL);
        assert_eq!(out.heights.len(), 3);
        assert_eq!(out.masks.len(), 3);
        let rep = score(&out, &b.gt_dsm, None).unwrap();
        let spacing = (hi - lo) / 31.0;
        assert!(rep.mae <= 2.0 * spacing, "mae {} spacing {}", rep.mae, spacing);
        assert_eq!(out.losses.len(), 1);
        assert!(out.losses[0].hei_corr > 0.9);
        let stages: Vec<_> = out.timings.iter().map(|t| t.stage.as_str()).collect();
        assert_eq!(stages, ["features", "heights", "cscm", "aggregation", "dsm", "losses"]);
    }
}
