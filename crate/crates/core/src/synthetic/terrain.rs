//! Procedural heightfields with exact or marched ray intersection, and a
//! band-limited hashed value-noise albedo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Surface shape. Heights are absolute elevations in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Relief {
    Flat { height: f64 },
    Ramp { base: f64, slope_east: f64, slope_north: f64 },
    /// Flat ground at `ground` with `count` box buildings whose roofs lie in
    /// `[h_min, h_max]`.
    Buildings { count: usize, ground: f64, h_min: f64, h_max: f64 },
    Fractal { octaves: u32, base: f64, amplitude: f64 },
}

impl Default for Relief {
    fn default() -> Self {
        Relief::Buildings {
            count: 6,
            ground: 20.0,
            h_min: 26.0,
            h_max: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub east: [f64; 2],
    pub north: [f64; 2],
    pub roof: f64,
}

impl Building {
    fn contains(&self, e: f64, n: f64) -> bool {
        e >= self.east[0] && e < self.east[1] && n >= self.north[0] && n < self.north[1]
    }

    /// Entry parameter of the ray into the box `[east]×[north]×[-∞, roof]`.
    fn ray_entry(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let lo = [self.east[0], self.north[0], f64::NEG_INFINITY];
        let hi = [self.east[1], self.north[1], self.roof];
        for k in 0..3 {
            if d[k].abs() < 1e-300 {
                if o[k] < lo[k] || o[k] > hi[k] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t1 > 0.0).then_some(t0.max(0.0))
    }
}

/// A concrete heightfield over the scene's local frame.
#[derive(Debug, Clone)]
pub struct Terrain {
    relief: Relief,
    buildings: Vec<Building>,
    seed: u64,
    extent: f64,
    /// Horizontal march step for non-analytic reliefs.
    step: f64,
}

impl Terrain {
    pub fn new(relief: &Relief, seed: u64, extent: f64, gsd: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e44_a1f0);
        let buildings = match *relief {
            Relief::Buildings { count, h_min, h_max, .. } => (0..count)
                .map(|_| {
                    let w = rng.random_range(0.12..0.25) * extent;
                    let d = rng.random_range(0.12..0.25) * extent;
                    let ce = rng.random_range(-0.5 * extent + w / 2.0..0.5 * extent - w / 2.0);
                    let cn = rng.random_range(-0.5 * extent + d / 2.0..0.5 * extent - d / 2.0);
                    let roof = if h_max > h_min { rng.random_range(h_min..=h_max) } else { h_min };
                    Building {
                        east: [ce - w / 2.0, ce + w / 2.0],
                        north: [cn - d / 2.0, cn + d / 2.0],
                        roof,
                    }
                })
                .collect(),
            _ => Vec::new(),
        };
        Self {
            relief: relief.clone(),
            buildings,
            seed,
            extent,
            step: gsd / 4.0,
        }
    }

    pub fn buildings(&self) -> &[Building] {
        &self.buildings
    }

    pub fn height_at(&self, e: f64, n: f64) -> f64 {
        match self.relief {
            Relief::Flat { height } => height,
            Relief::Ramp { base, slope_east, slope_north } => base + slope_east * e + slope_north * n,
            Relief::Buildings { ground, .. } => self
                .buildings
                .iter()
                .filter(|b| b.contains(e, n))
                .map(|b| b.roof)
                .fold(ground, f64::max),
            Relief::Fractal { octaves, base, amplitude } => {
                let mut h = 0.0;
                let mut amp = 1.0;
                let mut norm = 0.0;
                let mut wavelength = self.extent / 2.0;
                for k in 0..octaves.max(1) {
                    let s = self.seed.wrapping_add(0x1000 + k as u64);
                    h += amp * value_noise([e / wavelength, n / wavelength, 0.0], s);
                    norm += amp;
                    amp *= 0.5;
                    wavelength *= 0.5;
                }
                base + amplitude * h / norm
            }
        }
    }

    /// Elevation bounds of the surface within the scene extent (fractal
    /// bounds are conservative).
    pub fn height_bounds(&self) -> (f64, f64) {
        match self.relief {
            Relief::Flat { height } => (height, height),
            Relief::Ramp { base, slope_east, slope_north } => {
                let r = 0.5 * self.extent * (slope_east.abs() + slope_north.abs());
                (base - r, base + r)
            }
            Relief::Buildings { ground, .. } => {
                let top = self.buildings.iter().map(|b| b.roof).fold(ground, f64::max);
                (ground, top)
            }
            Relief::Fractal { base, amplitude, .. } => (base - amplitude.abs(), base + amplitude.abs()),
        }
    }

    /// Nearest intersection parameter of the ray `o + t·d` (d pointing
    /// down) with the surface.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match self.relief {
            Relief::Flat { height } => plane_hit(o, d, height, 0.0, 0.0),
            Relief::Ramp { base, slope_east, slope_north } => plane_hit(o, d, base, slope_east, slope_north),
            Relief::Buildings { ground, .. } => {
                let mut best = plane_hit(o, d, ground, 0.0, 0.0);
                for b in &self.buildings {
                    if let Some(t) = b.ray_entry(o, d) {
                        best = Some(best.map_or(t, |bt: f64| bt.min(t)));
                    }
                }
                best
            }
            Relief::Fractal { .. } => self.march(o, d),
        }
    }

    fn march(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        if d[2] >= 0.0 {
            return None;
        }
        let (lo, hi) = self.height_bounds();
        let t_start = ((hi + 1.0 - o[2]) / d[2]).max(0.0);
        let t_end = (lo - 1.0 - o[2]) / d[2];
        let horiz = d[0].hypot(d[1]).max(1e-9);
        let dt = (self.step / horiz).min((t_end - t_start) / 8.0).max(1e-9);
        let above = |t: f64| {
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            p[2] > self.height_at(p[0], p[1])
        };
        let mut t_prev = t_start;
        let mut t = t_start;
        while t < t_end {
            t = (t + dt).min(t_end);
            if !above(t) {
                let (mut a, mut b) = (t_prev, t);
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if above(m) {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                return Some(0.5 * (a + b));
            }
            t_prev = t;
        }
        None
    }

    /// Albedo at a surface point: band-limited luminance noise, a checker of
    /// random gray cells and weak per-channel variation, every component in
    /// about [0.15, 0.85].
    pub fn albedo(&self, x: [f64; 3], finest_wavelength: f64) -> [f64; 3] {
        let octave = |p: [f64; 3], seed: u64| {
            let mut v = 0.0;
            for (k, w) in [0.5, 0.3, 0.2].into_iter().enumerate() {
                let l = finest_wavelength * (1 << k) as f64;
                v += w * value_noise([p[0] / l, p[1] / l, p[2] / l], seed.wrapping_add(k as u64 * 7919));
            }
            v
        };
        let lum = octave(x, self.seed);
        let cs = 0.75 * finest_wavelength;
        let checker = lattice(
            (x[0] / cs).floor() as i64,
            (x[1] / cs).floor() as i64,
            (x[2] / cs).floor() as i64,
            self.seed.wrapping_add(4409),
        );
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let chroma = value_noise(
                [x[0] / (4.0 * finest_wavelength), x[1] / (4.0 * finest_wavelength), x[2] / (4.0 * finest_wavelength)],
                self.seed.wrapping_add(101 + k as u64),
            );
            *o = 0.5 + 0.15 * lum + 0.15 * checker + 0.05 * chroma;
        }
        out
    }
}

fn plane_hit(o: [f64; 3], d: [f64; 3], base: f64, se: f64, sn: f64) -> Option<f64> {
    let denom = d[2] - se * d[0] - sn * d[1];
    if denom.abs() < 1e-300 {
        return None;
    }
    let t = (base + se * o[0] + sn * o[1] - o[2]) / denom;
    (t > 0.0).then_some(t)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Lattice value in [-1, 1].
fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = splitmix(
        seed ^ splitmix((ix as u64).wrapping_mul(0x8da6_b343) ^ (iy as u64).wrapping_mul(0xd816_3841) ^ (iz as u64).wrapping_mul(0xcb1a_b31f)),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Trilinear value noise on the integer lattice with quintic easing.
pub fn value_noise(p: [f64; 3], seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let i = f.map(|v| v as i64);
    let w = [fade(p[0] - f[0]), fade(p[1] - f[1]), fade(p[2] - f[2])];
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let wt = (if dx == 1 { w[0] } else { 1.0 - w[0] })
            * (if dy == 1 { w[1] } else { 1.0 - w[1] })
            * (if dz == 1 { w[2] } else { 1.0 - w[2] });
        acc += wt * lattice(i[0] + dx, i[1] + dy, i[2] + dz, seed);
    }
    acc
}
