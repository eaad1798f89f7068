//! Geodetic and image coordinate types and the local metric frame.

use serde::{Deserialize, Serialize};

/// Mean earth radius used by the spherical local-frame approximation.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Geodetic position: degrees of latitude/longitude, meters of height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    pub hei: f64,
}

impl GeoPoint {
    pub const fn new(lat: f64, lon: f64, hei: f64) -> Self {
        Self { lat, lon, hei }
    }

    pub fn is_finite(&self) -> bool {
        self.lat.is_finite() && self.lon.is_finite() && self.hei.is_finite()
    }

    pub fn in_range(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Image position. `u` is the sample (column), `v` the line (row).
///
/// Integer coordinates address pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    pub fn dist(&self, other: &PixelCoord) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Local east-north-up frame anchored at a geodetic origin, on a spherical
/// earth. East and north are arc lengths along the sphere scaled at the
/// origin latitude; up is the geodetic height. The mapping is affine in
/// (lat, lon, hei), so planes of constant height stay planes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: GeoPoint,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        Self { origin }
    }

    fn meters_per_deg_lat() -> f64 {
        EARTH_RADIUS_M * std::f64::consts::PI / 180.0
    }

    fn meters_per_deg_lon(&self) -> f64 {
        Self::meters_per_deg_lat() * self.origin.lat.to_radians().cos()
    }

    pub fn to_enu(&self, g: &GeoPoint) -> [f64; 3] {
        [
            (g.lon - self.origin.lon) * self.meters_per_deg_lon(),
            (g.lat - self.origin.lat) * Self::meters_per_deg_lat(),
            g.hei - self.origin.hei,
        ]
    }

    pub fn to_geo(&self, enu: [f64; 3]) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + enu[1] / Self::meters_per_deg_lat(),
            lon: self.origin.lon + enu[0] / self.meters_per_deg_lon(),
            hei: self.origin.hei + enu[2],
        }
    }

    /// Re-express a point given in `other`'s coordinates in this frame.
    pub fn from_frame(&self, other: &LocalFrame, enu: [f64; 3]) -> [f64; 3] {
        if other == self {
            return enu;
        }
        self.to_enu(&other.to_geo(enu))
    }
}
