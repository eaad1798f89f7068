use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Gaussian, GaussianError, GaussianSet};
use crate::aggregation::GridSpec;
use crate::geo::{GeoPoint, LocalFrame};
use crate::raster::RasterF32;
use crate::rpc::PinholeFit;

/// Footprint cut-off as a squared Mahalanobis distance (3σ).
const CULL_MAHALANOBIS_SQ: f64 = 9.0;
/// Compositing stops once the remaining transmittance drops below this.
pub(crate) const MIN_TRANSMITTANCE: f64 = 1e-4;
const TILE: usize = 16;

/// North-up nadir view of the ENU frame at `origin`: pixel `(col, row)` has
/// its center at `(west + (col + 0.5)·gsd, north − (row + 0.5)·gsd)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthoCamera {
    pub origin: GeoPoint,
    pub west: f64,
    pub north: f64,
    pub gsd: f64,
}

impl OrthoCamera {
    pub fn from_grid(grid: &GridSpec) -> Self {
        Self {
            origin: grid.origin,
            west: grid.west,
            north: grid.north,
            gsd: grid.cell_size,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RenderCamera<'a> {
    Pinhole(&'a PinholeFit),
    Orthographic(OrthoCamera),
}

/// Projected center, depth and 2×3 Jacobian of a camera-frame point.
type Projection = (f64, f64, f64, [[f64; 3]; 2]);

impl RenderCamera<'_> {
    fn frame(&self) -> LocalFrame {
        match self {
            RenderCamera::Pinhole(p) => p.frame(),
            RenderCamera::Orthographic(o) => LocalFrame::new(o.origin),
        }
    }

    fn project(&self, x: [f64; 3]) -> Option<Projection> {
        match self {
            RenderCamera::Pinhole(p) => {
                if p.homogeneous(x)[2] <= 0.0 {
                    return None;
                }
                let px = p.project(x)?;
                Some((px.u, px.v, p.depth(x), p.jacobian(x)?))
            }
            RenderCamera::Orthographic(o) => {
                let u = (x[0] - o.west) / o.gsd - 0.5;
                let v = (o.north - x[1]) / o.gsd - 0.5;
                let j = [[1.0 / o.gsd, 0.0, 0.0], [0.0, -1.0 / o.gsd, 0.0]];
                Some((u, v, -x[2], j))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub n_gaussians: usize,
    pub n_splatted: usize,
    /// Behind the camera or entirely off-image.
    pub n_culled: usize,
    /// Skipped because the projected covariance was not positive definite.
    pub n_degenerate: usize,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// RGB image.
    pub image: RasterF32,
    /// Accumulated opacity `1 − T` per pixel.
    pub opacity: RasterF32,
    pub report: RenderReport,
}

/// A Gaussian prepared for compositing in image space.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// Inverse 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    source: usize,
}

impl Splat {
    /// Opacity after the 2D falloff at pixel center `(x, y)`, or `None`
    /// outside the 3σ footprint.
    #[inline]
    pub fn alpha_at(&self, x: f64, y: f64) -> Option<f64> {
        let (dx, dy) = (x - self.u, y - self.v);
        let [a, b, c] = self.conic;
        let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        (m <= CULL_MAHALANOBIS_SQ).then(|| self.alpha * (-0.5 * m).exp())
    }
}

pub(crate) enum SplatOutcome {
    Splat(Splat),
    Culled,
    Degenerate,
}

/// EWA first-order projection of one Gaussian.
pub(crate) fn project_gaussian(
    g: &Gaussian,
    index: usize,
    cam: &RenderCamera<'_>,
    to_cam: &dyn Fn([f64; 3]) -> [f64; 3],
    frame_jac: &[[f64; 3]; 3],
) -> SplatOutcome {
    let x = to_cam(g.mu);
    let Some((u, v, depth, jc)) = cam.project(x) else {
        return SplatOutcome::Culled;
    };
    // J = Jc · A, with A the Jacobian of the frame change
    let mut j = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            j[r][c] = (0..3).map(|k| jc[r][k] * frame_jac[k][c]).sum();
        }
    }
    let s = g.covariance();
    let mut js = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            js[r][c] = (0..3).map(|k| j[r][k] * s[k][c]).sum();
        }
    }
    let cov = |r: usize, c: usize| -> f64 { (0..3).map(|k| js[r][k] * j[c][k]).sum() };
    let (a, b, c) = (cov(0, 0), 0.5 * (cov(0, 1) + cov(1, 0)), cov(1, 1));
    let det = a * c - b * b;
    if !(a > 0.0 && c > 0.0 && det > 0.0 && det.is_finite()) {
        return SplatOutcome::Degenerate;
    }
    let lambda_max = 0.5 * (a + c) + (0.25 * (a - c).powi(2) + b * b).sqrt();
    SplatOutcome::Splat(Splat {
        u,
        v,
        depth,
        conic: [c / det, -b / det, a / det],
        radius: CULL_MAHALANOBIS_SQ.sqrt() * lambda_max.sqrt(),
        color: g.color(),
        alpha: g.alpha,
        source: index,
    })
}

/// Depth order with a content-based tie break, so the result does not
/// depend on the input ordering.
pub(crate) fn splat_order(set: &GaussianSet) -> impl Fn(&Splat, &Splat) -> Ordering + '_ {
    move |x, y| {
        x.depth.total_cmp(&y.depth).then_with(|| {
            let (gx, gy) = (&set.gaussians[x.source], &set.gaussians[y.source]);
            let kx = gx.mu.iter().chain(&gx.scale).chain(&gx.rot).chain(&gx.sh0).chain([&gx.alpha]);
            let ky = gy.mu.iter().chain(&gy.scale).chain(&gy.rot).chain(&gy.sh0).chain([&gy.alpha]);
            kx.zip(ky)
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    }
}

/// Projects and depth-sorts every Gaussian of `set` for `cam`.
pub(crate) fn prepare_splats(
    set: &GaussianSet,
    cam: &RenderCamera<'_>,
    dims: (usize, usize),
) -> (Vec<Splat>, RenderReport) {
    let cam_frame = cam.frame();
    let to_cam = |x: [f64; 3]| cam_frame.from_frame(&set.frame, x);
    // the frame change is affine, so unit differences give its Jacobian
    let base = to_cam([0.0; 3]);
    let mut frame_jac = [[0.0; 3]; 3];
    for c in 0..3 {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let moved = to_cam(e);
        for r in 0..3 {
            frame_jac[r][c] = moved[r] - base[r];
        }
    }
    let (h, w) = dims;
    let mut report = RenderReport {
        n_gaussians: set.len(),
        ..Default::default()
    };
    let outcomes: Vec<SplatOutcome> = set
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| project_gaussian(g, i, cam, &to_cam, &frame_jac))
        .collect();
    let mut splats = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            SplatOutcome::Splat(s) => {
                let off = s.u + s.radius < -0.5
                    || s.v + s.radius < -0.5
                    || s.u - s.radius > w as f64 - 0.5
                    || s.v - s.radius > h as f64 - 0.5;
                if off || !(s.u.is_finite() && s.v.is_finite()) {
                    report.n_culled += 1;
                } else {
                    splats.push(s);
                }
            }
            SplatOutcome::Culled => report.n_culled += 1,
            SplatOutcome::Degenerate => report.n_degenerate += 1,
        }
    }
    splats.sort_by(splat_order(set));
    report.n_splatted = splats.len();
    if report.n_degenerate > 0 {
        log::debug!("render skipped {} degenerate Gaussians", report.n_degenerate);
    }
    (splats, report)
}

/// Front-to-back compositing of depth-sorted splats at one pixel. Returns
/// the color and the final transmittance.
#[inline]
pub(crate) fn composite<'a>(
    splats: impl Iterator<Item = &'a Splat>,
    x: f64,
    y: f64,
    background: [f64; 3],
) -> ([f64; 3], f64) {
    let mut t = 1.0f64;
    let mut col = [0.0f64; 3];
    for s in splats {
        let Some(a) = s.alpha_at(x, y) else {
            continue;
        };
        for k in 0..3 {
            col[k] += t * a * s.color[k];
        }
        t *= 1.0 - a;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for k in 0..3 {
        col[k] += t * background[k];
    }
    (col, t)
}

/// Splats `set` into a `dims = (height, width)` image seen by `cam`.
pub fn render(
    set: &GaussianSet,
    cam: &RenderCamera<'_>,
    dims: (usize, usize),
    opts: &RenderOptions,
) -> Result<RenderOutput, GaussianError> {
    if set.is_empty() {
        return Err(GaussianError::EmptySet);
    }
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(GaussianError::ShapeMismatch("empty image".into()));
    }
    let (splats, report) = prepare_splats(set, cam, dims);
    let (tx, ty) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
    for (i, s) in splats.iter().enumerate() {
        let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        let (c0, c1) = (clampi((s.u - s.radius).ceil(), w), clampi((s.u + s.radius).floor(), w));
        let (r0, r1) = (clampi((s.v - s.radius).ceil(), h), clampi((s.v + s.radius).floor(), h));
        for trow in r0 / TILE..=r1 / TILE {
            for tcol in c0 / TILE..=c1 / TILE {
                tiles[trow * tx + tcol].push(i as u32);
            }
        }
    }
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut rgb = Vec::with_capacity(w * 3);
            let mut opa = Vec::with_capacity(w);
            for col in 0..w {
                let list = &tiles[(row / TILE) * tx + col / TILE];
                let (c, t) = composite(
                    list.iter().map(|&i| &splats[i as usize]),
                    col as f64,
                    row as f64,
                    opts.background,
                );
                rgb.extend(c.map(|v| v as f32));
                opa.push((1.0 - t) as f32);
            }
            (rgb, opa)
        })
        .collect();
    let (mut rgb, mut opa) = (Vec::with_capacity(h * w * 3), Vec::with_capacity(h * w));
    for (a, b) in rows {
        rgb.extend(a);
        opa.extend(b);
    }
    Ok(RenderOutput {
        image: RasterF32::from_vec(h, w, 3, rgb).expect("render dims"),
        opacity: RasterF32::from_vec(h, w, 1, opa).expect("render dims"),
        report,
    })
}
