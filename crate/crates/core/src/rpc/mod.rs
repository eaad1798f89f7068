//! Rational polynomial (RPC00B) camera model.
//!
//! Image line and sample are ratios of cubic polynomials in normalized
//! latitude, longitude and height. Coefficients follow the 20-term RPC00B
//! ordering:
//!
//! ```text
//! 1, L, P, H, LP, LH, PH, L², P², H², PLH, L³, LP², LH², L²P, P³, PH², L²H, P²H, H³
//! ```
//!
//! with `L` = latitude, `P` = longitude, `H` = height, all normalized by
//! their offset and scale.

mod io;
mod pinhole;

pub use io::{parse_rpc, serialize_rpc};
pub use pinhole::{fit_pinhole, mean_fitting_error, parse_pinhole, PinholeFit, PixelRect};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoPoint, PixelCoord};

/// Number of coefficients per RPC polynomial.
pub const RPC_TERMS: usize = 20;

const DEN_EPS: f64 = 1e-10;
const JACOBIAN_EPS: f64 = 1e-14;
const LOCALIZE_TOL_PX: f64 = 1e-6;
const LOCALIZE_TARGET_PX: f64 = 1e-10;
const LOCALIZE_MAX_ITERS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RpcError {
    #[error("denominator polynomial magnitude below 1e-10")]
    DenominatorNearZero,
    #[error("non-finite input or camera parameter")]
    NonFinite,
    #[error("inverse localization did not converge (residual {residual:.3e} px)")]
    NoConvergence { residual: f64 },
    #[error("singular localization jacobian")]
    SingularJacobian,
    #[error("degenerate pinhole fit: {0}")]
    DegenerateFit(String),
    #[error("invalid RPC model: {0}")]
    InvalidModel(String),
    #[error("RPC schema error: field `{0}`")]
    Schema(String),
    #[error("coefficient vector `{field}` has {len} entries, expected 20")]
    CoefficientCount { field: String, len: usize },
}

/// An RPC camera. Immutable after construction; every operation is a pure
/// function of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcModel {
    pub line_off: f64,
    pub samp_off: f64,
    pub lat_off: f64,
    pub lon_off: f64,
    pub hei_off: f64,
    pub line_scale: f64,
    pub samp_scale: f64,
    pub lat_scale: f64,
    pub lon_scale: f64,
    pub hei_scale: f64,
    pub line_num: [f64; RPC_TERMS],
    pub line_den: [f64; RPC_TERMS],
    pub samp_num: [f64; RPC_TERMS],
    pub samp_den: [f64; RPC_TERMS],
}

/// Monomials of the RPC00B ordering at a normalized point.
pub fn rpc_terms(l: f64, p: f64, h: f64) -> [f64; RPC_TERMS] {
    [
        1.0,
        l,
        p,
        h,
        l * p,
        l * h,
        p * h,
        l * l,
        p * p,
        h * h,
        p * l * h,
        l * l * l,
        l * p * p,
        l * h * h,
        l * l * p,
        p * p * p,
        p * h * h,
        l * l * h,
        p * p * h,
        h * h * h,
    ]
}

fn poly(c: &[f64; RPC_TERMS], t: &[f64; RPC_TERMS]) -> f64 {
    c.iter().zip(t).map(|(a, b)| a * b).sum()
}

/// Polynomial value with partial derivatives in normalized L and P.
fn poly_grad(c: &[f64; RPC_TERMS], l: f64, p: f64, h: f64) -> (f64, f64, f64) {
    let t = rpc_terms(l, p, h);
    let dl = [
        0.0,
        1.0,
        0.0,
        0.0,
        p,
        h,
        0.0,
        2.0 * l,
        0.0,
        0.0,
        p * h,
        3.0 * l * l,
        p * p,
        h * h,
        2.0 * l * p,
        0.0,
        0.0,
        2.0 * l * h,
        0.0,
        0.0,
    ];
    let dp = [
        0.0,
        0.0,
        1.0,
        0.0,
        l,
        0.0,
        h,
        0.0,
        2.0 * p,
        0.0,
        l * h,
        0.0,
        2.0 * l * p,
        0.0,
        l * l,
        3.0 * p * p,
        h * h,
        0.0,
        2.0 * p * h,
        0.0,
    ];
    (poly(c, &t), poly(c, &dl), poly(c, &dp))
}

/// Normalized ratio values and their (L, P) derivatives.
struct RatioEval {
    line: f64,
    samp: f64,
    // d(line)/dL, d(line)/dP, d(samp)/dL, d(samp)/dP in normalized units
    jac: [f64; 4],
}

impl RpcModel {
    /// Checks the structural invariants of the model.
    pub fn validate(&self) -> Result<(), RpcError> {
        let offsets = [
            self.line_off,
            self.samp_off,
            self.lat_off,
            self.lon_off,
            self.hei_off,
        ];
        let scales = [
            ("line_scale", self.line_scale),
            ("samp_scale", self.samp_scale),
            ("lat_scale", self.lat_scale),
            ("lon_scale", self.lon_scale),
            ("hei_scale", self.hei_scale),
        ];
        if offsets.iter().any(|v| !v.is_finite())
            || self
                .coefficient_sets()
                .iter()
                .any(|(_, c)| c.iter().any(|v| !v.is_finite()))
        {
            return Err(RpcError::NonFinite);
        }
        for (name, s) in scales {
            if !(s.is_finite() && s > 0.0) {
                return Err(RpcError::InvalidModel(format!("{name} must be positive")));
            }
        }
        if self.line_den[0] == 0.0 || self.samp_den[0] == 0.0 {
            return Err(RpcError::InvalidModel(
                "denominator constant term is zero".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn coefficient_sets(&self) -> [(&'static str, &[f64; RPC_TERMS]); 4] {
        [
            ("line_num", &self.line_num),
            ("line_den", &self.line_den),
            ("samp_num", &self.samp_num),
            ("samp_den", &self.samp_den),
        ]
    }

    pub fn normalize(&self, g: &GeoPoint) -> [f64; 3] {
        [
            (g.lat - self.lat_off) / self.lat_scale,
            (g.lon - self.lon_off) / self.lon_scale,
            (g.hei - self.hei_off) / self.hei_scale,
        ]
    }

    pub fn denormalize(&self, n: [f64; 3]) -> GeoPoint {
        GeoPoint {
            lat: n[0] * self.lat_scale + self.lat_off,
            lon: n[1] * self.lon_scale + self.lon_off,
            hei: n[2] * self.hei_scale + self.hei_off,
        }
    }

    /// True when the point lies inside `factor` times the normalized
    /// validity cube.
    pub fn in_validity_cube(&self, g: &GeoPoint, factor: f64) -> bool {
        self.normalize(g).iter().all(|c| c.abs() <= factor)
    }

    /// Height range covered by the normalized cube scaled by `factor`.
    pub fn height_range(&self, factor: f64) -> (f64, f64) {
        (
            self.hei_off - factor * self.hei_scale,
            self.hei_off + factor * self.hei_scale,
        )
    }

    fn ratios(&self, l: f64, p: f64, h: f64) -> Result<(f64, f64), RpcError> {
        let t = rpc_terms(l, p, h);
        let line_den = poly(&self.line_den, &t);
        let samp_den = poly(&self.samp_den, &t);
        if line_den.abs() < DEN_EPS || samp_den.abs() < DEN_EPS {
            return Err(RpcError::DenominatorNearZero);
        }
        Ok((
            poly(&self.line_num, &t) / line_den,
            poly(&self.samp_num, &t) / samp_den,
        ))
    }

    fn ratios_with_jacobian(&self, l: f64, p: f64, h: f64) -> Result<RatioEval, RpcError> {
        let (ln, ln_l, ln_p) = poly_grad(&self.line_num, l, p, h);
        let (ld, ld_l, ld_p) = poly_grad(&self.line_den, l, p, h);
        let (sn, sn_l, sn_p) = poly_grad(&self.samp_num, l, p, h);
        let (sd, sd_l, sd_p) = poly_grad(&self.samp_den, l, p, h);
        if ld.abs() < DEN_EPS || sd.abs() < DEN_EPS {
            return Err(RpcError::DenominatorNearZero);
        }
        let line = ln / ld;
        let samp = sn / sd;
        Ok(RatioEval {
            line,
            samp,
            jac: [
                (ln_l - line * ld_l) / ld,
                (ln_p - line * ld_p) / ld,
                (sn_l - samp * sd_l) / sd,
                (sn_p - samp * sd_p) / sd,
            ],
        })
    }

    /// Forward projection of a geodetic point into the image.
    pub fn project(&self, g: &GeoPoint) -> Result<PixelCoord, RpcError> {
        if !g.is_finite() {
            return Err(RpcError::NonFinite);
        }
        let [l, p, h] = self.normalize(g);
        let (line, samp) = self.ratios(l, p, h)?;
        let out = PixelCoord {
            u: samp * self.samp_scale + self.samp_off,
            v: line * self.line_scale + self.line_off,
        };
        if !out.is_finite() {
            return Err(RpcError::NonFinite);
        }
        Ok(out)
    }

    /// Inverse localization: the ground point at height `h` that projects to
    /// pixel `px`. Damped Newton iteration in normalized (lat, lon) started at
    /// the model offsets.
    pub fn localize(&self, px: PixelCoord, h: f64) -> Result<GeoPoint, RpcError> {
        self.localize_from(px, h, None)
    }

    /// Same as [`RpcModel::localize`] with an optional warm-start guess for
    /// (lat, lon), used when sweeping neighbouring pixels.
    pub fn localize_from(
        &self,
        px: PixelCoord,
        h: f64,
        guess: Option<(f64, f64)>,
    ) -> Result<GeoPoint, RpcError> {
        self.localize_traced(px, h, guess, None)
    }

    pub(crate) fn localize_traced(
        &self,
        px: PixelCoord,
        h: f64,
        guess: Option<(f64, f64)>,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<GeoPoint, RpcError> {
        if !px.is_finite() || !h.is_finite() {
            return Err(RpcError::NonFinite);
        }
        let hn = (h - self.hei_off) / self.hei_scale;
        let target_line = (px.v - self.line_off) / self.line_scale;
        let target_samp = (px.u - self.samp_off) / self.samp_scale;
        let (mut l, mut p) = match guess {
            Some((lat, lon)) => (
                (lat - self.lat_off) / self.lat_scale,
                (lon - self.lon_off) / self.lon_scale,
            ),
            None => (0.0, 0.0),
        };
        if !(l.is_finite() && p.is_finite()) {
            l = 0.0;
            p = 0.0;
        }

        let pixel_residual = |line: f64, samp: f64| {
            ((target_line - line) * self.line_scale).hypot((target_samp - samp) * self.samp_scale)
        };

        let mut eval = self.ratios_with_jacobian(l, p, hn)?;
        let mut residual = pixel_residual(eval.line, eval.samp);
        for _ in 0..LOCALIZE_MAX_ITERS {
            if let Some(t) = trace.as_deref_mut() {
                t.push(residual);
            }
            if residual < LOCALIZE_TARGET_PX {
                break;
            }
            let [a, b, c, d] = eval.jac;
            let det = a * d - b * c;
            if !det.is_finite() || det.abs() < JACOBIAN_EPS {
                return Err(RpcError::SingularJacobian);
            }
            let rl = target_line - eval.line;
            let rs = target_samp - eval.samp;
            let dl = (d * rl - b * rs) / det;
            let dp = (a * rs - c * rl) / det;

            // Backtrack until the residual stops growing.
            let mut step = 1.0;
            let mut accepted = None;
            while step > 1e-6 {
                let (nl, np) = (l + step * dl, p + step * dp);
                if let Ok(e) = self.ratios_with_jacobian(nl, np, hn) {
                    let r = pixel_residual(e.line, e.samp);
                    if r.is_finite() && r <= residual {
                        accepted = Some((nl, np, e, r));
                        break;
                    }
                }
                step *= 0.5;
            }
            match accepted {
                Some((nl, np, e, r)) => {
                    let stalled = r >= residual;
                    l = nl;
                    p = np;
                    eval = e;
                    residual = r;
                    if stalled {
                        break;
                    }
                }
                None => break,
            }
        }
        if residual >= LOCALIZE_TOL_PX || !residual.is_finite() {
            return Err(RpcError::NoConvergence { residual });
        }
        Ok(self.denormalize([l, p, hn]))
    }

    /// Ground sampling distance in meters around `px`, measured on the local
    /// tangent frame at height `h`.
    pub fn ground_sampling_distance(&self, px: PixelCoord, h: f64) -> Result<f64, RpcError> {
        use crate::geo::LocalFrame;
        let c = self.localize(px, h)?;
        let frame = LocalFrame::new(c);
        let gu = self.localize_from(PixelCoord::new(px.u + 1.0, px.v), h, Some((c.lat, c.lon)))?;
        let gv = self.localize_from(PixelCoord::new(px.u, px.v + 1.0), h, Some((c.lat, c.lon)))?;
        let eu = frame.to_enu(&gu);
        let ev = frame.to_enu(&gv);
        Ok(0.5 * (eu[0].hypot(eu[1]) + ev[0].hypot(ev[1])))
    }
}

#[cfg(test)]
pub(crate) mod test_models {
    use super::*;

    /// Line follows latitude and sample follows longitude, both linearly.
    pub fn identity_like() -> RpcModel {
        let mut line_num = [0.0; RPC_TERMS];
        let mut samp_num = [0.0; RPC_TERMS];
        let mut den = [0.0; RPC_TERMS];
        line_num[1] = 1.0;
        samp_num[2] = 1.0;
        den[0] = 1.0;
        RpcModel {
            line_off: 512.0,
            samp_off: 480.0,
            lat_off: 35.0,
            lon_off: 139.0,
            hei_off: 50.0,
            line_scale: 512.0,
            samp_scale: 480.0,
            lat_scale: 0.01,
            lon_scale: 0.012,
            hei_scale: 100.0,
            line_num,
            line_den: den,
            samp_num,
            samp_den: den,
        }
    }

    /// A mildly nonlinear model with height parallax and cubic terms.
    pub fn warped() -> RpcModel {
        let mut m = identity_like();
        m.line_num[1] = -1.0;
        m.line_num[3] = 0.05;
        m.line_num[4] = 0.01;
        m.line_num[11] = 0.002;
        m.samp_num[2] = 1.0;
        m.samp_num[3] = 0.08;
        m.samp_num[8] = -0.004;
        m.samp_num[18] = 0.001;
        m.line_den[1] = 0.001;
        m.line_den[3] = 0.0005;
        m.samp_den[2] = -0.0008;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::test_models::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn origin_projects_to_offsets() {
        let rpc = identity_like();
        let p = rpc
            .project(&GeoPoint::new(rpc.lat_off, rpc.lon_off, rpc.hei_off))
            .unwrap();
        assert_eq!(p, PixelCoord::new(rpc.samp_off, rpc.line_off));
    }

    #[test]
    fn linear_lat_term() {
        let rpc = identity_like();
        let p = rpc
            .project(&GeoPoint::new(
                rpc.lat_off + rpc.lat_scale,
                rpc.lon_off,
                rpc.hei_off,
            ))
            .unwrap();
        assert!((p.v - (rpc.line_off + rpc.line_scale)).abs() < 1e-9);
        assert!((p.u - rpc.samp_off).abs() < 1e-9);
    }

    #[test]
    fn localize_at_origin() {
        let rpc = identity_like();
        let g = rpc
            .localize(PixelCoord::new(rpc.samp_off, rpc.line_off), rpc.hei_off)
            .unwrap();
        assert_eq!(g, GeoPoint::new(rpc.lat_off, rpc.lon_off, rpc.hei_off));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let rpc = warped();
        assert_eq!(
            rpc.project(&GeoPoint::new(f64::NAN, 139.0, 0.0)),
            Err(RpcError::NonFinite)
        );
        assert_eq!(
            rpc.localize(PixelCoord::new(f64::INFINITY, 1.0), 0.0),
            Err(RpcError::NonFinite)
        );
    }

    #[test]
    fn vanishing_denominator_detected() {
        let mut rpc = identity_like();
        rpc.samp_den[1] = -1.0; // den = 1 - L, zero at L = 1
        let g = GeoPoint::new(rpc.lat_off + rpc.lat_scale, rpc.lon_off, rpc.hei_off);
        assert_eq!(rpc.project(&g), Err(RpcError::DenominatorNearZero));
    }

    #[test]
    fn singular_jacobian_detected() {
        let mut rpc = identity_like();
        // sample no longer depends on longitude: the 2x2 system is rank one
        rpc.samp_num = [0.0; RPC_TERMS];
        rpc.samp_num[1] = 1.0;
        let err = rpc
            .localize(PixelCoord::new(rpc.samp_off + 3.0, rpc.line_off + 1.0), 0.0)
            .unwrap_err();
        assert_eq!(err, RpcError::SingularJacobian);
    }

    #[test]
    fn validate_rejects_bad_scale() {
        let mut rpc = identity_like();
        rpc.hei_scale = 0.0;
        assert!(matches!(rpc.validate(), Err(RpcError::InvalidModel(_))));
        rpc.hei_scale = 1.0;
        rpc.line_den[0] = 0.0;
        assert!(matches!(rpc.validate(), Err(RpcError::InvalidModel(_))));
    }

    #[test]
    fn newton_residuals_non_increasing() {
        let rpc = warped();
        let target = PixelCoord::new(880.0, 40.0);
        let mut trace = Vec::new();
        rpc.localize_traced(target, 120.0, None, Some(&mut trace))
            .unwrap();
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "residual grew: {trace:?}");
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let rpc = warped();
        let (l, p, h) = (0.3, -0.2, 0.4);
        let e = rpc.ratios_with_jacobian(l, p, h).unwrap();
        let eps = 1e-6;
        let (a1, b1) = rpc.ratios(l + eps, p, h).unwrap();
        let (a0, b0) = rpc.ratios(l - eps, p, h).unwrap();
        let (c1, d1) = rpc.ratios(l, p + eps, h).unwrap();
        let (c0, d0) = rpc.ratios(l, p - eps, h).unwrap();
        let fd = [
            (a1 - a0) / (2.0 * eps),
            (c1 - c0) / (2.0 * eps),
            (b1 - b0) / (2.0 * eps),
            (d1 - d0) / (2.0 * eps),
        ];
        for (x, y) in e.jac.iter().zip(fd) {
            assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_through_localize(l in -1.0f64..1.0, p in -1.0f64..1.0, h in -1.2f64..1.2) {
            let rpc = warped();
            let g = rpc.denormalize([l, p, h]);
            let px = rpc.project(&g).unwrap();
            let back = rpc.localize(px, g.hei).unwrap();
            prop_assert!((back.lat - g.lat).abs() < 1e-8);
            prop_assert!((back.lon - g.lon).abs() < 1e-8);
            let again = rpc.project(&back).unwrap();
            prop_assert!(again.dist(&px) < 1e-6);
        }
    }
}
