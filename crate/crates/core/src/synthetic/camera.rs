//! Exact view cameras the oracle RPCs are fitted to.

use serde::{Deserialize, Serialize};

use crate::geo::{GeoPoint, LocalFrame, PixelCoord};

/// A camera defined in closed form on a local ENU frame.
pub trait ExactCamera: Send + Sync {
    fn frame(&self) -> LocalFrame;

    /// Image size as `(height, width)`.
    fn dims(&self) -> (usize, usize);

    /// Pixel of an ENU point; `None` behind the sensor.
    fn project(&self, x: [f64; 3]) -> Option<PixelCoord>;

    /// Viewing ray through a pixel as `(origin, unit direction)`.
    fn ray(&self, px: PixelCoord) -> ([f64; 3], [f64; 3]);

    fn project_geo(&self, g: &GeoPoint) -> Option<PixelCoord> {
        self.project(self.frame().to_enu(g))
    }

    /// Intersection of the pixel's ray with the plane of constant
    /// elevation `hei`.
    fn localize_plane(&self, px: PixelCoord, hei: f64) -> Option<GeoPoint> {
        let frame = self.frame();
        let (o, d) = self.ray(px);
        let z = hei - frame.origin.hei;
        if d[2].abs() < 1e-300 {
            return None;
        }
        let t = (z - o[2]) / d[2];
        Some(frame.to_geo([o[0] + t * d[0], o[1] + t * d[1], z]))
    }
}

/// Viewing direction of a satellite: `off_nadir` tilt from vertical and
/// the azimuth (clockwise from north) of the sensor as seen from the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub off_nadir_deg: f64,
    pub azimuth_deg: f64,
}

/// Right, down and forward unit vectors of a north-up view looking at the
/// target from `pose`.
fn basis(pose: Pose) -> [[f64; 3]; 3] {
    let (th, az) = (pose.off_nadir_deg.to_radians(), pose.azimuth_deg.to_radians());
    let to_cam = [th.sin() * az.sin(), th.sin() * az.cos(), th.cos()];
    let fwd = to_cam.map(|v| -v);
    // image rows follow south projected onto the image plane
    let s = [0.0, -1.0, 0.0];
    let sf = dot(s, fwd);
    let down = normalize([s[0] - sf * fwd[0], s[1] - sf * fwd[1], s[2] - sf * fwd[2]]);
    let right = cross(down, fwd);
    [right, down, fwd]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    a.map(|v| v / n)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn axpy(a: f64, x: [f64; 3], y: [f64; 3]) -> [f64; 3] {
    [a * x[0] + y[0], a * x[1] + y[1], a * x[2] + y[2]]
}

/// Central projection with square pixels and the principal point at the
/// image center.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveCamera {
    pub frame: LocalFrame,
    pub center: [f64; 3],
    /// Rows: right, down, forward.
    pub rot: [[f64; 3]; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl PerspectiveCamera {
    /// Camera `distance` meters from `target` along `pose`, with focal
    /// length chosen so a pixel spans `gsd` meters at the target.
    pub fn look_at(
        frame: LocalFrame,
        target: [f64; 3],
        pose: Pose,
        distance: f64,
        gsd: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let rot = basis(pose);
        Self {
            frame,
            center: axpy(-distance, rot[2], target),
            rot,
            focal: distance / gsd,
            width,
            height,
        }
    }

    fn principal(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

impl ExactCamera for PerspectiveCamera {
    fn frame(&self) -> LocalFrame {
        self.frame
    }

    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn project(&self, x: [f64; 3]) -> Option<PixelCoord> {
        let d = sub(x, self.center);
        let c = self.rot.map(|r| dot(r, d));
        if c[2] <= 0.0 {
            return None;
        }
        let (cx, cy) = self.principal();
        Some(PixelCoord::new(cx + self.focal * c[0] / c[2], cy + self.focal * c[1] / c[2]))
    }

    fn ray(&self, px: PixelCoord) -> ([f64; 3], [f64; 3]) {
        let (cx, cy) = self.principal();
        let (a, b) = ((px.u - cx) / self.focal, (px.v - cy) / self.focal);
        let [r, dn, f] = self.rot;
        let d = normalize([
            a * r[0] + b * dn[0] + f[0],
            a * r[1] + b * dn[1] + f[1],
            a * r[2] + b * dn[2] + f[2],
        ]);
        (self.center, d)
    }
}

/// Parallel projection: pixel coordinates are affine in ENU position.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCamera {
    pub frame: LocalFrame,
    pub target: [f64; 3],
    pub rot: [[f64; 3]; 3],
    pub gsd: f64,
    pub width: usize,
    pub height: usize,
}

impl AffineCamera {
    pub fn look_at(frame: LocalFrame, target: [f64; 3], pose: Pose, gsd: f64, width: usize, height: usize) -> Self {
        Self {
            frame,
            target,
            rot: basis(pose),
            gsd,
            width,
            height,
        }
    }
}

impl ExactCamera for AffineCamera {
    fn frame(&self) -> LocalFrame {
        self.frame
    }

    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn project(&self, x: [f64; 3]) -> Option<PixelCoord> {
        let d = sub(x, self.target);
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        Some(PixelCoord::new(
            cx + dot(self.rot[0], d) / self.gsd,
            cy + dot(self.rot[1], d) / self.gsd,
        ))
    }

    fn ray(&self, px: PixelCoord) -> ([f64; 3], [f64; 3]) {
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        let [r, dn, f] = self.rot;
        let o = axpy((px.u - cx) * self.gsd, r, self.target);
        let o = axpy((px.v - cy) * self.gsd, dn, o);
        (axpy(-1.0e4, f, o), f)
    }
}

/// Linear pushbroom sensor: each image row is exposed from its own
/// position along a straight track, so rows are a parallel projection and
/// columns a central one.
#[derive(Debug, Clone, PartialEq)]
pub struct PushbroomCamera {
    pub frame: LocalFrame,
    /// Sensor position when the center row is exposed.
    pub center: [f64; 3],
    pub rot: [[f64; 3]; 3],
    pub focal: f64,
    pub gsd: f64,
    pub width: usize,
    pub height: usize,
}

impl PushbroomCamera {
    pub fn look_at(
        frame: LocalFrame,
        target: [f64; 3],
        pose: Pose,
        distance: f64,
        gsd: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let rot = basis(pose);
        Self {
            frame,
            center: axpy(-distance, rot[2], target),
            rot,
            focal: distance / gsd,
            gsd,
            width,
            height,
        }
    }

    fn principal(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

impl ExactCamera for PushbroomCamera {
    fn frame(&self) -> LocalFrame {
        self.frame
    }

    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn project(&self, x: [f64; 3]) -> Option<PixelCoord> {
        let d = sub(x, self.center);
        let (cx, cy) = self.principal();
        // the track runs along the down axis, which is normal to every scan plane
        let along = dot(self.rot[1], d);
        let depth = dot(self.rot[2], d);
        if depth <= 0.0 {
            return None;
        }
        Some(PixelCoord::new(
            cx + self.focal * dot(self.rot[0], d) / depth,
            cy + along / self.gsd,
        ))
    }

    fn ray(&self, px: PixelCoord) -> ([f64; 3], [f64; 3]) {
        let (cx, cy) = self.principal();
        let [r, dn, f] = self.rot;
        let o = axpy((px.v - cy) * self.gsd, dn, self.center);
        let a = (px.u - cx) / self.focal;
        (o, normalize(axpy(a, r, f)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FRAME: LocalFrame = LocalFrame {
        origin: GeoPoint::new(35.0, 139.0, 0.0),
    };

    fn cams() -> Vec<Box<dyn ExactCamera>> {
        let pose = Pose {
            off_nadir_deg: 17.0,
            azimuth_deg: 130.0,
        };
        let t = [1.0, -2.0, 10.0];
        vec![
            Box::new(PerspectiveCamera::look_at(FRAME, t, pose, 5.0e5, 0.3, 200, 160)),
            Box::new(AffineCamera::look_at(FRAME, t, pose, 0.3, 200, 160)),
            Box::new(PushbroomCamera::look_at(FRAME, t, pose, 5.0e5, 0.3, 200, 160)),
        ]
    }

    #[test]
    fn target_projects_to_center() {
        for cam in cams() {
            let p = cam.project([1.0, -2.0, 10.0]).unwrap();
            assert!((p.u - 99.5).abs() < 1e-6 && (p.v - 79.5).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn rays_round_trip() {
        for cam in cams() {
            for (u, v) in [(0.0, 0.0), (37.5, 120.0), (199.0, 159.0)] {
                let px = PixelCoord::new(u, v);
                for h in [-5.0, 12.0, 80.0] {
                    let g = cam.localize_plane(px, h).unwrap();
                    assert!((g.hei - h).abs() < 1e-9);
                    let back = cam.project_geo(&g).unwrap();
                    assert!(back.dist(&px) < 1e-6, "{back:?} vs {px:?}");
                }
            }
        }
    }

    #[test]
    fn north_up_and_gsd() {
        let nadir = Pose {
            off_nadir_deg: 0.0,
            azimuth_deg: 0.0,
        };
        let cam = PerspectiveCamera::look_at(FRAME, [0.0; 3], nadir, 5.0e5, 0.5, 101, 101);
        let c = cam.project([0.0, 0.0, 0.0]).unwrap();
        let e = cam.project([0.5, 0.0, 0.0]).unwrap();
        let s = cam.project([0.0, -0.5, 0.0]).unwrap();
        assert!((e.u - c.u - 1.0).abs() < 1e-6 && (e.v - c.v).abs() < 1e-9);
        assert!((s.v - c.v - 1.0).abs() < 1e-6);
    }
}
