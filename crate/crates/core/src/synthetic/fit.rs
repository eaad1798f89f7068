//! Least-squares RPC fitting to an exact camera.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::camera::ExactCamera;
use super::SyntheticError;
use crate::geo::{GeoPoint, PixelCoord};
use crate::rpc::{rpc_terms, RpcModel, RPC_TERMS};

/// Validation threshold on the maximum reprojection error, pixels.
pub const MAX_FIT_ERROR_PX: f64 = 0.01;
const TRAIN_STEPS: usize = 10;
const VALIDATION_STEPS: usize = 27;

/// Geodetic box `[lat] × [lon] × [hei]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub lat: [f64; 2],
    pub lon: [f64; 2],
    pub hei: [f64; 2],
}

impl GeoBox {
    fn is_degenerate(&self) -> bool {
        [self.lat, self.lon, self.hei]
            .iter()
            .any(|r| !(r[1] > r[0]) || !r[0].is_finite() || !r[1].is_finite())
    }

    fn at(&self, n: [f64; 3]) -> GeoPoint {
        let lerp = |r: [f64; 2], t: f64| 0.5 * (r[0] + r[1]) + 0.5 * (r[1] - r[0]) * t;
        GeoPoint::new(lerp(self.lat, n[0]), lerp(self.lon, n[1]), lerp(self.hei, n[2]))
    }
}

fn grid(steps: usize) -> impl Iterator<Item = [f64; 3]> {
    let s = move |k: usize| -1.0 + 2.0 * k as f64 / (steps - 1) as f64;
    (0..steps).flat_map(move |i| (0..steps).flat_map(move |j| (0..steps).map(move |k| [s(i), s(j), s(k)])))
}

/// Number of leading RPC terms of total degree ≤ `degree`.
fn terms_for_degree(degree: usize) -> usize {
    match degree {
        1 => 4,
        2 => 10,
        _ => RPC_TERMS,
    }
}

/// Solves `num·t − y·(den[1..]·t[1..]) = y` for one image coordinate.
fn fit_ratio(samples: &[([f64; RPC_TERMS], f64)], n: usize) -> Option<([f64; RPC_TERMS], [f64; RPC_TERMS])> {
    let cols = 2 * n - 1;
    let mut a = DMatrix::<f64>::zeros(samples.len(), cols);
    let mut b = DVector::<f64>::zeros(samples.len());
    for (r, (t, y)) in samples.iter().enumerate() {
        for k in 0..n {
            a[(r, k)] = t[k];
        }
        for k in 1..n {
            a[(r, n + k - 1)] = -y * t[k];
        }
        b[r] = *y;
    }
    let x = a.svd(true, true).solve(&b, 1e-12).ok()?;
    let mut num = [0.0; RPC_TERMS];
    let mut den = [0.0; RPC_TERMS];
    num[..n].copy_from_slice(&x.as_slice()[..n]);
    den[0] = 1.0;
    den[1..n].copy_from_slice(&x.as_slice()[n..]);
    Some((num, den))
}

/// Maximum pixel distance between the RPC and the camera over the
/// validation grid, or `None` if some point cannot be projected.
fn validation_error(rpc: &RpcModel, cam: &dyn ExactCamera, volume: &GeoBox) -> Option<f64> {
    let mut worst = 0.0f64;
    for n in grid(VALIDATION_STEPS) {
        let g = volume.at(n);
        let want = cam.project_geo(&g)?;
        let got = rpc.project(&g).ok()?;
        worst = worst.max(got.dist(&want));
    }
    Some(worst)
}

/// Fits an RPC to `cam` over `volume`, trying degrees 1 to 3 and keeping
/// the most accurate on a validation grid about 20 times denser than the
/// training grid.
pub fn fit_rpc_oracle(cam: &dyn ExactCamera, volume: &GeoBox) -> Result<RpcModel, SyntheticError> {
    if volume.is_degenerate() {
        return Err(SyntheticError::BadSpec(format!("degenerate fit volume {volume:?}")));
    }
    let mut train: Vec<([f64; 3], PixelCoord)> = Vec::new();
    for n in grid(TRAIN_STEPS) {
        let px = cam
            .project_geo(&volume.at(n))
            .ok_or_else(|| SyntheticError::NotVisible("fit volume is behind the camera".into()))?;
        train.push((n, px));
    }
    let (h, w) = cam.dims();
    let center = cam
        .project_geo(&volume.at([0.0; 3]))
        .ok_or_else(|| SyntheticError::NotVisible("volume center behind the camera".into()))?;
    if !(center.u >= -0.5 && center.v >= -0.5 && center.u <= w as f64 - 0.5 && center.v <= h as f64 - 0.5) {
        return Err(SyntheticError::NotVisible(format!(
            "volume center projects to ({:.1}, {:.1}) outside the {w}x{h} image",
            center.u, center.v
        )));
    }
    let range = |f: &dyn Fn(&PixelCoord) -> f64| {
        let lo = train.iter().map(|(_, p)| f(p)).fold(f64::INFINITY, f64::min);
        let hi = train.iter().map(|(_, p)| f(p)).fold(f64::NEG_INFINITY, f64::max);
        (0.5 * (lo + hi), (0.5 * (hi - lo)).max(1e-6))
    };
    let (samp_off, samp_scale) = range(&|p| p.u);
    let (line_off, line_scale) = range(&|p| p.v);
    let half = |r: [f64; 2]| (0.5 * (r[0] + r[1]), 0.5 * (r[1] - r[0]));
    let (lat_off, lat_scale) = half(volume.lat);
    let (lon_off, lon_scale) = half(volume.lon);
    let (hei_off, hei_scale) = half(volume.hei);

    let line_samples: Vec<_> = train
        .iter()
        .map(|(n, p)| (rpc_terms(n[0], n[1], n[2]), (p.v - line_off) / line_scale))
        .collect();
    let samp_samples: Vec<_> = train
        .iter()
        .map(|(n, p)| (rpc_terms(n[0], n[1], n[2]), (p.u - samp_off) / samp_scale))
        .collect();

    let mut best: Option<(f64, RpcModel)> = None;
    for degree in 1..=3 {
        let n = terms_for_degree(degree);
        let (Some((line_num, line_den)), Some((samp_num, samp_den))) =
            (fit_ratio(&line_samples, n), fit_ratio(&samp_samples, n))
        else {
            continue;
        };
        let rpc = RpcModel {
            line_off,
            samp_off,
            lat_off,
            lon_off,
            hei_off,
            line_scale,
            samp_scale,
            lat_scale,
            lon_scale,
            hei_scale,
            line_num,
            line_den,
            samp_num,
            samp_den,
        };
        let Some(err) = validation_error(&rpc, cam, volume) else {
            continue;
        };
        log::debug!("synthetic RPC degree {degree} validation error {err:.3e} px");
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, rpc));
        }
        if err < 1e-9 {
            break;
        }
    }
    match best {
        Some((err, rpc)) if err < MAX_FIT_ERROR_PX => Ok(rpc),
        Some((err, _)) => Err(SyntheticError::FitResidualTooLarge(err)),
        None => Err(SyntheticError::FitResidualTooLarge(f64::INFINITY)),
    }
}

/// Maximum RPC-vs-camera error over the validation grid of `volume`.
pub fn fit_residual(rpc: &RpcModel, cam: &dyn ExactCamera, volume: &GeoBox) -> Option<f64> {
    validation_error(rpc, cam, volume)
}

#[cfg(test)]
mod tests {
    use super::super::camera::{AffineCamera, PerspectiveCamera, Pose, PushbroomCamera};
    use super::*;
    use crate::geo::LocalFrame;

    const FRAME: LocalFrame = LocalFrame {
        origin: GeoPoint::new(35.0, 139.0, 0.0),
    };
    const POSE: Pose = Pose {
        off_nadir_deg: 20.0,
        azimuth_deg: 75.0,
    };

    fn volume() -> GeoBox {
        let a = FRAME.to_geo([-40.0, -40.0, 0.0]);
        let b = FRAME.to_geo([40.0, 40.0, 0.0]);
        GeoBox {
            lat: [a.lat, b.lat],
            lon: [a.lon, b.lon],
            hei: [0.0, 50.0],
        }
    }

    #[test]
    fn affine_is_exact() {
        let cam = AffineCamera::look_at(FRAME, [0.0; 3], POSE, 0.3, 300, 300);
        let rpc = fit_rpc_oracle(&cam, &volume()).unwrap();
        assert!(fit_residual(&rpc, &cam, &volume()).unwrap() < 1e-8);
    }

    #[test]
    fn perspective_and_pushbroom_fit() {
        let v = volume();
        let p = PerspectiveCamera::look_at(FRAME, [0.0; 3], POSE, 5.0e5, 0.3, 300, 300);
        let rpc = fit_rpc_oracle(&p, &v).unwrap();
        assert!(fit_residual(&rpc, &p, &v).unwrap() < MAX_FIT_ERROR_PX);
        let pb = PushbroomCamera::look_at(FRAME, [0.0; 3], POSE, 5.0e5, 0.3, 300, 300);
        let rpc = fit_rpc_oracle(&pb, &v).unwrap();
        assert!(fit_residual(&rpc, &pb, &v).unwrap() < MAX_FIT_ERROR_PX);
    }

    #[test]
    fn camera_looking_elsewhere() {
        let cam = PerspectiveCamera::look_at(FRAME, [5000.0, 0.0, 0.0], POSE, 5.0e5, 0.3, 300, 300);
        assert!(matches!(
            fit_rpc_oracle(&cam, &volume()),
            Err(SyntheticError::NotVisible(_))
        ));
    }

    #[test]
    fn degenerate_volume() {
        let mut v = volume();
        v.hei = [10.0, 10.0];
        let cam = AffineCamera::look_at(FRAME, [0.0; 3], POSE, 0.3, 300, 300);
        assert!(matches!(fit_rpc_oracle(&cam, &v), Err(SyntheticError::BadSpec(_))));
    }
}
