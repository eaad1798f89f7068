//! 3D Gaussian scene built from a height map, with a CPU splatting renderer
//! and a binary on-disk table.

mod io;
mod render;

use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{GeoPoint, LocalFrame, PixelCoord};
use crate::raster::RasterF32;
use crate::rpc::RpcModel;

pub use io::{decode_skgs, encode_skgs, SKGS_MAGIC};
pub use render::{render, OrthoCamera, RenderCamera, RenderOptions, RenderReport};

/// Degree-0 spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_1;

pub const DEFAULT_ALPHA: f64 = 0.8;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("height map has no valid pixel")]
    EmptyHeightMap,
    #[error("Gaussian set is empty")]
    EmptySet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid Gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("malformed SKGS data: {0}")]
    Format(String),
    #[error("camera error: {0}")]
    Camera(#[from] crate::rpc::RpcError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    /// Center in the owning set's ENU frame, meters.
    pub mu: [f64; 3],
    /// Standard deviations along the rotated axes, meters.
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rot: [f64; 4],
    /// Degree-0 SH coefficients per RGB channel.
    pub sh0: [f64; 3],
    pub alpha: f64,
}

impl Gaussian {
    /// Isotropic, axis-aligned Gaussian with the given display color.
    pub fn isotropic(mu: [f64; 3], sigma: f64, color: [f64; 3], alpha: f64) -> Self {
        Self {
            mu,
            scale: [sigma; 3],
            rot: [1.0, 0.0, 0.0, 0.0],
            sh0: color.map(color_to_sh0),
            alpha,
        }
    }

    /// RGB color seen from any direction (degree-0 SH), floored at zero.
    pub fn color(&self) -> [f64; 3] {
        self.sh0.map(|c| (SH_C0 * c + 0.5).max(0.0))
    }

    pub fn validate(&self) -> Result<(), String> {
        let qn = self.rot.iter().map(|q| q * q).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-6 {
            return Err(format!("quaternion norm {qn}"));
        }
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(format!("scale {:?}", self.scale));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {}", self.alpha));
        }
        if !self.mu.iter().chain(&self.sh0).all(|v| v.is_finite()) {
            return Err("non-finite center or color".into());
        }
        Ok(())
    }

    /// `R · diag(s²) · Rᵀ`.
    pub fn covariance(&self) -> [[f64; 3]; 3] {
        let r = rotation_matrix(self.rot);
        let s2 = self.scale.map(|s| s * s);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| r[i][k] * s2[k] * r[j][k]).sum();
            }
        }
        out
    }
}

pub fn color_to_sh0(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

fn rotation_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Gaussians expressed in the ENU frame anchored at `frame.origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub frame: LocalFrame,
    pub gaussians: Vec<Gaussian>,
}

impl GaussianSet {
    pub fn new(origin: GeoPoint, gaussians: Vec<Gaussian>) -> Self {
        Self {
            frame: LocalFrame::new(origin),
            gaussians,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Appends `other`, re-expressing its centers in this set's frame.
    pub fn extend_from(&mut self, other: &GaussianSet) {
        self.gaussians.extend(other.gaussians.iter().map(|g| Gaussian {
            mu: self.frame.from_frame(&other.frame, g.mu),
            ..*g
        }));
    }
}

/// Optional per-pixel attributes for [`lift_heights`]. Missing rasters fall
/// back to: gray color, isotropic scale equal to the ground sampling
/// distance, opacity [`DEFAULT_ALPHA`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LiftAttrs<'a> {
    /// RGB (3 channels) or gray (1 channel) display color.
    pub color: Option<&'a RasterF32>,
    /// Isotropic (1 channel) or per-axis (3 channels) scale in meters.
    pub scale: Option<&'a RasterF32>,
    pub alpha: Option<&'a RasterF32>,
}

/// One Gaussian per valid height pixel, centered where the reference camera
/// ray through the pixel meets the predicted height, in a local metric frame
/// anchored below the image center. Pixels whose localization fails are
/// left out.
pub fn lift_heights(
    h_map: &RasterF32,
    ref_rpc: &RpcModel,
    attrs: &LiftAttrs<'_>,
) -> Result<GaussianSet, GaussianError> {
    for (name, r) in [("color", attrs.color), ("scale", attrs.scale), ("alpha", attrs.alpha)] {
        if r.is_some_and(|r| !r.same_dims(h_map)) {
            return Err(GaussianError::ShapeMismatch(format!("{name} raster")));
        }
    }
    let valid: Vec<f64> = (0..h_map.pixel_count())
        .filter(|&i| h_map.is_valid_at(i))
        .map(|i| h_map.data()[i] as f64)
        .collect();
    if valid.is_empty() {
        return Err(GaussianError::EmptyHeightMap);
    }
    let mean_h = valid.iter().sum::<f64>() / valid.len() as f64;
    let center = PixelCoord::new(
        (h_map.width() as f64 - 1.0) / 2.0,
        (h_map.height() as f64 - 1.0) / 2.0,
    );
    let anchor = ref_rpc.localize(center, mean_h)?;
    let frame = LocalFrame::new(GeoPoint::new(anchor.lat, anchor.lon, 0.0));
    let gsd = if attrs.scale.is_none() {
        ref_rpc.ground_sampling_distance(center, mean_h)?
    } else {
        0.0
    };

    let rows: Vec<Vec<Gaussian>> = (0..h_map.height())
        .into_par_iter()
        .map(|row| {
            let mut out = Vec::new();
            let mut guess = None;
            for col in 0..h_map.width() {
                if !h_map.is_valid(row, col) {
                    continue;
                }
                let idx = h_map.index(row, col);
                let h = h_map.data()[idx] as f64;
                let px = PixelCoord::new(col as f64, row as f64);
                let Ok(g) = ref_rpc.localize_from(px, h, guess) else {
                    continue;
                };
                guess = Some((g.lat, g.lon));
                let color = match attrs.color {
                    Some(c) if c.channels() >= 3 => {
                        let p = c.pixel(idx);
                        [p[0], p[1], p[2]].map(|v| v as f64)
                    }
                    Some(c) => [c.pixel(idx)[0] as f64; 3],
                    None => [0.5; 3],
                };
                let scale = match attrs.scale {
                    Some(s) if s.channels() >= 3 => {
                        let p = s.pixel(idx);
                        [p[0], p[1], p[2]].map(|v| v as f64)
                    }
                    Some(s) => [s.pixel(idx)[0] as f64; 3],
                    None => [gsd; 3],
                };
                let alpha = attrs
                    .alpha
                    .map_or(DEFAULT_ALPHA, |a| (a.pixel(idx)[0] as f64).clamp(0.0, 1.0));
                out.push(Gaussian {
                    mu: frame.to_enu(&g),
                    scale,
                    rot: [1.0, 0.0, 0.0, 0.0],
                    sh0: color.map(color_to_sh0),
                    alpha,
                });
            }
            out
        })
        .collect();
    let gaussians: Vec<Gaussian> = rows.into_iter().flatten().collect();
    let omitted = valid.len() - gaussians.len();
    if omitted > 0 {
        log::debug!("gaussians {omitted} pixels failed to localize");
    }
    Ok(GaussianSet { frame, gaussians })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpc::test_models::{identity_like, warped};

    #[test]
    fn flat_map_gives_flat_centers() {
        let h = RasterF32::filled(6, 5, 1, 42.0);
        let set = lift_heights(&h, &identity_like(), &LiftAttrs::default()).unwrap();
        assert_eq!(set.len(), 30);
        for g in &set.gaussians {
            assert!((g.mu[2] - 42.0).abs() < 1e-9);
            assert!(g.validate().is_ok());
            assert_eq!(g.alpha, DEFAULT_ALPHA);
        }
    }

    #[test]
    fn one_gaussian_per_valid_pixel() {
        let mut h = RasterF32::filled(3, 3, 1, 10.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2), (1, 1)] {
            h.set_valid(r, c, false);
        }
        let set = lift_heights(&h, &warped(), &LiftAttrs::default()).unwrap();
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn empty_map_rejected() {
        let mut h = RasterF32::filled(1, 1, 1, 0.0);
        h.set_valid(0, 0, false);
        assert!(matches!(
            lift_heights(&h, &warped(), &LiftAttrs::default()),
            Err(GaussianError::EmptyHeightMap)
        ));
    }

    #[test]
    fn default_scale_is_gsd_and_color_follows_image() {
        let rpc = identity_like();
        let h = RasterF32::filled(4, 4, 1, 50.0);
        let img = RasterF32::from_fn(4, 4, 3, |r, c, k| (r * 4 + c + k) as f32 / 20.0);
        let attrs = LiftAttrs {
            color: Some(&img),
            ..Default::default()
        };
        let set = lift_heights(&h, &rpc, &attrs).unwrap();
        let gsd = rpc.ground_sampling_distance(PixelCoord::new(1.5, 1.5), 50.0).unwrap();
        for (i, g) in set.gaussians.iter().enumerate() {
            assert!((g.scale[0] - gsd).abs() < 1e-9);
            let want = img.pixel(i);
            for k in 0..3 {
                assert!((g.color()[k] - want[k] as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn covariance_of_rotated_gaussian() {
        // 90° about z swaps the x and y variances
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let g = Gaussian {
            mu: [0.0; 3],
            scale: [1.0, 2.0, 3.0],
            rot: [h, 0.0, 0.0, h],
            sh0: [0.0; 3],
            alpha: 1.0,
        };
        let c = g.covariance();
        assert!((c[0][0] - 4.0).abs() < 1e-12);
        assert!((c[1][1] - 1.0).abs() < 1e-12);
        assert!((c[2][2] - 9.0).abs() < 1e-12);
        assert!(c[0][1].abs() < 1e-12);
    }

    #[test]
    fn validation() {
        let mut g = Gaussian::isotropic([0.0; 3], 1.0, [0.2; 3], 0.5);
        assert!(g.validate().is_ok());
        g.rot = [1.0, 0.1, 0.0, 0.0];
        assert!(g.validate().is_err());
        g.rot = [1.0, 0.0, 0.0, 0.0];
        g.scale[1] = 0.0;
        assert!(g.validate().is_err());
    }
}
