//! Pinhole (3×4 projective) approximation of an RPC camera over an image
//! patch, by normalized DLT.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use super::{RpcError, RpcModel};
use crate::geo::{GeoPoint, LocalFrame, PixelCoord};

const GRID_UV: usize = 10;
const GRID_H: usize = 5;

/// Axis-aligned pixel rectangle, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl PixelRect {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        Self {
            u_min,
            v_min,
            u_max,
            v_max,
        }
    }

    /// Rectangle covering a `width × height` raster.
    pub fn of_raster(width: usize, height: usize) -> Self {
        Self::new(0.0, 0.0, width as f64 - 1.0, height as f64 - 1.0)
    }

    pub fn centered(center: PixelCoord, size: f64) -> Self {
        let r = 0.5 * size;
        Self::new(center.u - r, center.v - r, center.u + r, center.v + r)
    }

    pub fn center(&self) -> PixelCoord {
        PixelCoord::new(0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))
    }

    pub fn is_empty(&self) -> bool {
        !(self.u_max > self.u_min && self.v_max > self.v_min)
    }
}

/// A fitted projective camera acting on local ENU coordinates anchored at
/// `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinholeFit {
    pub p: [[f64; 4]; 3],
    pub origin: GeoPoint,
    pub patch_bounds: PixelRect,
    pub height_range: [f64; 2],
    pub mfe: f64,
}

impl PinholeFit {
    pub fn frame(&self) -> LocalFrame {
        LocalFrame::new(self.origin)
    }

    /// Homogeneous image coordinates of an ENU point.
    pub fn homogeneous(&self, x: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(&self.p) {
            *o = row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + row[3];
        }
        out
    }

    pub fn project(&self, x: [f64; 3]) -> Option<PixelCoord> {
        let [a, b, w] = self.homogeneous(x);
        if w.abs() < f64::MIN_POSITIVE || !w.is_finite() {
            return None;
        }
        Some(PixelCoord::new(a / w, b / w))
    }

    /// Unit viewing direction in ENU, pointing away from the camera. For a
    /// projective camera this is the principal axis; for an affine one the
    /// null direction of the first two rows. Oriented downward.
    pub fn forward(&self) -> [f64; 3] {
        let m1 = Vector3::new(self.p[0][0], self.p[0][1], self.p[0][2]);
        let m2 = Vector3::new(self.p[1][0], self.p[1][1], self.p[1][2]);
        let m3 = Vector3::new(self.p[2][0], self.p[2][1], self.p[2][2]);
        let scale = m1.norm().max(m2.norm()) * 1e-12 / (1.0 + self.p[2][3].abs());
        let mut f = if m3.norm() > scale {
            m3
        } else {
            m1.cross(&m2)
        };
        if f.z > 0.0 {
            f = -f;
        }
        let f = f.normalize();
        [f.x, f.y, f.z]
    }

    /// Depth along [`PinholeFit::forward`]; larger is farther from the camera.
    pub fn depth(&self, x: [f64; 3]) -> f64 {
        let f = self.forward();
        f[0] * x[0] + f[1] * x[1] + f[2] * x[2]
    }

    /// 2×3 Jacobian of the pixel position with respect to ENU position.
    pub fn jacobian(&self, x: [f64; 3]) -> Option<[[f64; 3]; 2]> {
        let [a, b, w] = self.homogeneous(x);
        if w.abs() < f64::MIN_POSITIVE {
            return None;
        }
        let (u, v) = (a / w, b / w);
        let mut j = [[0.0; 3]; 2];
        for k in 0..3 {
            j[0][k] = (self.p[0][k] - u * self.p[2][k]) / w;
            j[1][k] = (self.p[1][k] - v * self.p[2][k]) / w;
        }
        Some(j)
    }
}

/// Mean reprojection error of a 3×4 matrix over ENU/pixel correspondences.
/// Invariant to the overall scale of `p`.
pub fn mean_fitting_error(p: &[[f64; 4]; 3], samples: &[([f64; 3], PixelCoord)]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|(x, px)| {
            let h: Vec<f64> = p
                .iter()
                .map(|r| r[0] * x[0] + r[1] * x[1] + r[2] * x[2] + r[3])
                .collect();
            (h[0] / h[2] - px.u).hypot(h[1] / h[2] - px.v)
        })
        .sum();
    total / samples.len() as f64
}

fn similarity_2d(pts: &[PixelCoord]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cu, cv) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.u / n, b + p.v / n));
    let mean_d = pts.iter().map(|p| (p.u - cu).hypot(p.v - cv)).sum::<f64>() / n;
    let s = if mean_d > 0.0 {
        std::f64::consts::SQRT_2 / mean_d
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cu, 0.0, s, -s * cv, 0.0, 0.0, 1.0)
}

fn similarity_3d(pts: &[[f64; 3]]) -> Matrix4<f64> {
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let mean_d = pts
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_d > 0.0 {
        3f64.sqrt() / mean_d
    } else {
        1.0
    };
    Matrix4::new(
        s,
        0.0,
        0.0,
        -s * c[0],
        0.0,
        s,
        0.0,
        -s * c[1],
        0.0,
        0.0,
        s,
        -s * c[2],
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

/// Fits a pinhole camera to `rpc` over `patch` and the height interval
/// `hrange` from a 10×10×5 grid of localized samples.
pub fn fit_pinhole(
    rpc: &RpcModel,
    patch: PixelRect,
    hrange: [f64; 2],
) -> Result<PinholeFit, RpcError> {
    if patch.is_empty() {
        return Err(RpcError::DegenerateFit("empty patch".into()));
    }
    if !(hrange[0].is_finite() && hrange[1].is_finite()) {
        return Err(RpcError::NonFinite);
    }
    if (hrange[1] - hrange[0]).abs() <= f64::EPSILON * hrange[0].abs().max(1.0) {
        return Err(RpcError::DegenerateFit(
            "zero height range gives coplanar samples".into(),
        ));
    }
    let h_mid = 0.5 * (hrange[0] + hrange[1]);
    let center = rpc.localize(patch.center(), h_mid)?;
    let frame = LocalFrame::new(GeoPoint::new(center.lat, center.lon, 0.0));

    let mut samples = Vec::with_capacity(GRID_UV * GRID_UV * GRID_H);
    for k in 0..GRID_H {
        let h = hrange[0] + (hrange[1] - hrange[0]) * k as f64 / (GRID_H - 1) as f64;
        for j in 0..GRID_UV {
            let v = patch.v_min + (patch.v_max - patch.v_min) * j as f64 / (GRID_UV - 1) as f64;
            for i in 0..GRID_UV {
                let u =
                    patch.u_min + (patch.u_max - patch.u_min) * i as f64 / (GRID_UV - 1) as f64;
                let px = PixelCoord::new(u, v);
                let g = rpc.localize_from(px, h, Some((center.lat, center.lon)))?;
                samples.push((frame.to_enu(&g), px));
            }
        }
    }

    let pts3: Vec<[f64; 3]> = samples.iter().map(|s| s.0).collect();
    let pts2: Vec<PixelCoord> = samples.iter().map(|s| s.1).collect();
    let t2 = similarity_2d(&pts2);
    let t3 = similarity_3d(&pts3);

    let n = samples.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (r, (x, px)) in samples.iter().enumerate() {
        let xn = t3 * nalgebra::Vector4::new(x[0], x[1], x[2], 1.0);
        let un = t2 * Vector3::new(px.u, px.v, 1.0);
        let xh = [xn[0], xn[1], xn[2], xn[3]];
        for k in 0..4 {
            a[(2 * r, k)] = xh[k];
            a[(2 * r, 8 + k)] = -un[0] * xh[k];
            a[(2 * r + 1, 4 + k)] = xh[k];
            a[(2 * r + 1, 8 + k)] = -un[1] * xh[k];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| RpcError::DegenerateFit("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    if sv[second] <= 1e-10 * sv.max() {
        return Err(RpcError::DegenerateFit(
            "sample configuration does not determine a unique camera".into(),
        ));
    }
    let row = v_t.row(smallest);
    let pn = nalgebra::Matrix3x4::from_fn(|i, j| row[4 * i + j]);
    let t2_inv = t2
        .try_inverse()
        .ok_or_else(|| RpcError::DegenerateFit("normalization".into()))?;
    let pm = t2_inv * pn * t3;

    let mut p = [[0.0; 4]; 3];
    for (i, r) in p.iter_mut().enumerate() {
        for (j, c) in r.iter_mut().enumerate() {
            *c = pm[(i, j)];
        }
    }
    let rank_svd = pm.svd(false, false);
    if rank_svd.singular_values.min() <= 1e-12 * rank_svd.singular_values.max() {
        return Err(RpcError::DegenerateFit("projection matrix rank < 3".into()));
    }
    // Fix the arbitrary scale: unit third row, positive w at the samples.
    let norm = p[2].iter().map(|c| c * c).sum::<f64>().sqrt();
    let centroid_w: f64 = pts3
        .iter()
        .map(|x| p[2][0] * x[0] + p[2][1] * x[1] + p[2][2] * x[2] + p[2][3])
        .sum();
    let s = if centroid_w < 0.0 { -1.0 } else { 1.0 } / norm;
    for r in p.iter_mut() {
        for c in r.iter_mut() {
            *c *= s;
        }
    }

    let mfe = mean_fitting_error(&p, &samples);
    Ok(PinholeFit {
        p,
        origin: frame.origin,
        patch_bounds: patch,
        height_range: hrange,
        mfe,
    })
}

/// Reads a pinhole fit from JSON.
pub fn parse_pinhole(text: &str) -> Result<PinholeFit, RpcError> {
    let fit: PinholeFit =
        serde_json::from_str(text).map_err(|e| RpcError::Schema(format!("pinhole: {e}")))?;
    if fit.p.iter().flatten().any(|v| !v.is_finite()) {
        return Err(RpcError::NonFinite);
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::super::test_models::{identity_like, warped};
    use super::*;

    #[test]
    fn affine_rpc_is_fit_exactly() {
        let mut rpc = identity_like();
        rpc.line_num[3] = 0.2; // height parallax keeps it affine
        rpc.samp_num[3] = -0.1;
        let fit = fit_pinhole(&rpc, PixelRect::new(100.0, 120.0, 356.0, 376.0), [0.0, 80.0])
            .unwrap();
        assert!(fit.mfe < 1e-6, "mfe {}", fit.mfe);
    }

    #[test]
    fn flat_height_range_is_degenerate() {
        let err = fit_pinhole(&warped(), PixelRect::new(0.0, 0.0, 255.0, 255.0), [30.0, 30.0])
            .unwrap_err();
        assert!(matches!(err, RpcError::DegenerateFit(_)));
    }

    #[test]
    fn empty_patch_is_degenerate() {
        let err = fit_pinhole(&warped(), PixelRect::new(10.0, 10.0, 10.0, 50.0), [0.0, 30.0])
            .unwrap_err();
        assert!(matches!(err, RpcError::DegenerateFit(_)));
    }

    #[test]
    fn mfe_invariant_to_matrix_scale() {
        let rpc = warped();
        let fit = fit_pinhole(&rpc, PixelRect::new(0.0, 0.0, 300.0, 300.0), [0.0, 60.0]).unwrap();
        let frame = fit.frame();
        let samples: Vec<_> = [(10.0, 20.0, 5.0), (250.0, 30.0, 40.0), (120.0, 280.0, 55.0)]
            .iter()
            .map(|&(u, v, h)| {
                let px = PixelCoord::new(u, v);
                (frame.to_enu(&rpc.localize(px, h).unwrap()), px)
            })
            .collect();
        let base = mean_fitting_error(&fit.p, &samples);
        for k in [-3.5, 1e-4, 7e5] {
            let mut q = fit.p;
            q.iter_mut().flatten().for_each(|c| *c *= k);
            let e = mean_fitting_error(&q, &samples);
            assert!((e - base).abs() <= 1e-9 * base.max(1e-12), "{e} vs {base}");
        }
    }

    #[test]
    fn json_round_trip() {
        let fit = fit_pinhole(&warped(), PixelRect::new(0.0, 0.0, 100.0, 100.0), [0.0, 50.0])
            .unwrap();
        let text = serde_json::to_string(&fit).unwrap();
        assert_eq!(parse_pinhole(&text).unwrap(), fit);
    }
}
