//! Oracle harness: procedural scenes seen by exact cameras, RPCs fitted to
//! those cameras, rendered views with transients and radiometric shifts,
//! and the matching ground truth.

mod camera;
mod fit;
mod terrain;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{write_dsm, DsmGrid, GridSpec};
use crate::cscm::TransientMask;
use crate::geo::{GeoPoint, LocalFrame, PixelCoord};
use crate::raster::{save_raster, RasterF32};
use crate::rpc::{serialize_rpc, RpcError, RpcModel};

pub use camera::{AffineCamera, ExactCamera, PerspectiveCamera, Pose, PushbroomCamera};
pub use fit::{fit_residual, fit_rpc_oracle, GeoBox, MAX_FIT_ERROR_PX};
pub use terrain::{value_noise, Building, Relief, Terrain};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("bad scene spec: {0}")]
    BadSpec(String),
    #[error("RPC fit residual {0:.3e} px exceeds tolerance")]
    FitResidualTooLarge(f64),
    #[error("camera does not see the volume: {0}")]
    NotVisible(String),
    #[error("camera error: {0}")]
    Rpc(#[from] RpcError),
    #[error("writing bundle: {0}")]
    Io(String),
}

/// A transient object painted into one view: `rect` is
/// `[row0, col0, row1, col1]` with exclusive ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transient {
    pub view: usize,
    pub rect: [usize; 4],
    pub color: [f64; 3],
}

/// Per-view affine intensity change `gain·I + bias`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Radiometric {
    pub gain: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side of the square reconstructed area, meters.
    pub extent: f64,
    pub gsd: f64,
    /// Width and height of every view, pixels.
    pub image_size: usize,
    /// Geodetic latitude/longitude of the scene center.
    pub center_lat: f64,
    pub center_lon: f64,
    pub relief: Relief,
    pub n_views: usize,
    pub view_angles: Vec<Pose>,
    /// Sensor distance from the scene center, meters.
    pub distance: f64,
    pub transients: Vec<Transient>,
    pub radiometric: Vec<Radiometric>,
    pub dsm_cell_size: f64,
    /// Rays per pixel along each axis.
    pub supersample: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            extent: 60.0,
            gsd: 0.3,
            image_size: 256,
            center_lat: 35.0,
            center_lon: 139.0,
            relief: Relief::default(),
            n_views: 3,
            view_angles: Vec::new(),
            distance: 5.0e5,
            transients: Vec::new(),
            radiometric: Vec::new(),
            dsm_cell_size: 0.6,
            supersample: 4,
        }
    }
}

impl SceneSpec {
    /// Per-view poses: explicit angles, else a near-nadir first view and
    /// the rest spread evenly in azimuth at 18° off nadir.
    pub fn poses(&self) -> Vec<Pose> {
        if !self.view_angles.is_empty() {
            return self.view_angles.clone();
        }
        (0..self.n_views)
            .map(|i| {
                if i == 0 {
                    Pose {
                        off_nadir_deg: 8.0,
                        azimuth_deg: 0.0,
                    }
                } else {
                    Pose {
                        off_nadir_deg: 18.0,
                        azimuth_deg: 360.0 * i as f64 / self.n_views as f64,
                    }
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::BadSpec(m));
        if !(self.gsd > 0.0 && self.gsd.is_finite()) {
            return bad(format!("gsd {}", self.gsd));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad(format!("extent {}", self.extent));
        }
        if !(8..=4096).contains(&self.image_size) {
            return bad(format!("image_size {}", self.image_size));
        }
        if self.extent > self.image_size as f64 * self.gsd {
            return bad("extent exceeds the image footprint".into());
        }
        if self.n_views == 0 {
            return bad("n_views is 0".into());
        }
        if !self.view_angles.is_empty() && self.view_angles.len() != self.n_views {
            return bad(format!("{} view angles for {} views", self.view_angles.len(), self.n_views));
        }
        if self.poses().iter().any(|p| !(0.0..60.0).contains(&p.off_nadir_deg)) {
            return bad("off-nadir angles must lie in [0, 60) degrees".into());
        }
        if !(self.distance > 100.0 * self.extent) {
            return bad(format!("distance {} too small", self.distance));
        }
        if !self.radiometric.is_empty() && self.radiometric.len() != self.n_views {
            return bad(format!("{} radiometric entries for {} views", self.radiometric.len(), self.n_views));
        }
        if self.radiometric.iter().any(|r| !(r.gain > 0.0) || !r.bias.is_finite()) {
            return bad("radiometric gain must be positive".into());
        }
        for t in &self.transients {
            let [r0, c0, r1, c1] = t.rect;
            if t.view >= self.n_views || r0 >= r1 || c0 >= c1 || r1 > self.image_size || c1 > self.image_size {
                return bad(format!("transient {t:?} outside the views"));
            }
        }
        if !(self.dsm_cell_size > 0.0) {
            return bad(format!("dsm_cell_size {}", self.dsm_cell_size));
        }
        if !(1..=8).contains(&self.supersample) {
            return bad(format!("supersample {}", self.supersample));
        }
        if let Relief::Buildings { h_min, h_max, ground, .. } = self.relief {
            if !(h_min <= h_max && ground <= h_min) {
                return bad("buildings need ground <= h_min <= h_max".into());
            }
        }
        Ok(())
    }

    pub fn frame(&self) -> LocalFrame {
        LocalFrame::new(GeoPoint::new(self.center_lat, self.center_lon, 0.0))
    }

    /// DSM grid covering the scene extent, centered on the frame origin.
    pub fn dsm_grid(&self) -> GridSpec {
        let n = (self.extent / self.dsm_cell_size).ceil() as usize;
        let half = 0.5 * n as f64 * self.dsm_cell_size;
        GridSpec {
            origin: self.frame().origin,
            west: -half,
            north: half,
            cell_size: self.dsm_cell_size,
            rows: n,
            cols: n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub images: Vec<RasterF32>,
    pub rpcs: Vec<RpcModel>,
    pub cameras: Vec<PerspectiveCamera>,
    /// Per-view elevation of the surface hit by each pixel's center ray.
    pub gt_height: Vec<RasterF32>,
    pub gt_dsm: DsmGrid,
    pub gt_transient_masks: Vec<TransientMask>,
    /// Per-view volume the RPC was fitted over.
    pub fit_volumes: Vec<GeoBox>,
    pub terrain: Terrain,
}

impl SceneBundle {
    /// Smallest and largest surface elevation in the scene.
    pub fn height_range(&self) -> (f64, f64) {
        self.terrain.height_bounds()
    }
}

/// Footprint of the image at the extreme elevations, padded.
fn fit_volume(cam: &PerspectiveCamera, lo: f64, hi: f64) -> Option<GeoBox> {
    let pad = 0.1 * (hi - lo) + 2.0;
    let (h0, h1) = (lo - pad, hi + pad);
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut lat = [f64::INFINITY, f64::NEG_INFINITY];
    let mut lon = [f64::INFINITY, f64::NEG_INFINITY];
    for (u, v) in [(-0.5, -0.5), (w - 0.5, -0.5), (-0.5, h - 0.5), (w - 0.5, h - 0.5)] {
        for z in [h0, h1] {
            let g = cam.localize_plane(PixelCoord::new(u, v), z)?;
            lat = [lat[0].min(g.lat), lat[1].max(g.lat)];
            lon = [lon[0].min(g.lon), lon[1].max(g.lon)];
        }
    }
    let (dl, dn) = (0.05 * (lat[1] - lat[0]), 0.05 * (lon[1] - lon[0]));
    Some(GeoBox {
        lat: [lat[0] - dl, lat[1] + dl],
        lon: [lon[0] - dn, lon[1] + dn],
        hei: [h0, h1],
    })
}

fn render_view(
    cam: &PerspectiveCamera,
    terrain: &Terrain,
    spec: &SceneSpec,
) -> (RasterF32, RasterF32) {
    let (w, h) = (cam.width, cam.height);
    let s = spec.supersample;
    let wavelength = 8.0 * spec.gsd;
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut rgb = Vec::with_capacity(3 * w);
            let mut hts = Vec::with_capacity(w);
            for col in 0..w {
                let mut acc = [0.0f64; 3];
                for i in 0..s {
                    for j in 0..s {
                        let du = (j as f64 + 0.5) / s as f64 - 0.5;
                        let dv = (i as f64 + 0.5) / s as f64 - 0.5;
                        let (o, d) = cam.ray(PixelCoord::new(col as f64 + du, row as f64 + dv));
                        let t = terrain.intersect(o, d).unwrap_or(0.0);
                        let c = terrain.albedo([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]], wavelength);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                let n = (s * s) as f64;
                rgb.extend(acc.map(|v| (v / n) as f32));
                let (o, d) = cam.ray(PixelCoord::new(col as f64, row as f64));
                let z = terrain.intersect(o, d).map_or(f64::NAN, |t| o[2] + t * d[2]);
                hts.push(z as f32);
            }
            (rgb, hts)
        })
        .collect();
    let mut img = Vec::with_capacity(3 * w * h);
    let mut hts = Vec::with_capacity(w * h);
    for (a, b) in rows {
        img.extend(a);
        hts.extend(b);
    }
    let mask: Vec<bool> = hts.iter().map(|v| v.is_finite()).collect();
    let gt = RasterF32::from_vec(h, w, 1, hts).expect("dims");
    let gt = if mask.iter().all(|m| *m) { gt } else { gt.with_mask(mask).expect("dims") };
    (RasterF32::from_vec(h, w, 3, img).expect("dims"), gt)
}

/// Builds the full bundle. Output depends only on `spec`.
pub fn generate(spec: &SceneSpec) -> Result<SceneBundle, SyntheticError> {
    spec.validate()?;
    let frame = spec.frame();
    let terrain = Terrain::new(&spec.relief, spec.seed, spec.extent, spec.gsd);
    let (lo, hi) = terrain.height_bounds();
    let target = [0.0, 0.0, 0.5 * (lo + hi)];
    let n = spec.image_size;
    let cameras: Vec<PerspectiveCamera> = spec
        .poses()
        .into_iter()
        .map(|pose| PerspectiveCamera::look_at(frame, target, pose, spec.distance, spec.gsd, n, n))
        .collect();

    let mut fit_volumes = Vec::with_capacity(cameras.len());
    let mut rpcs = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let vol = fit_volume(cam, lo, hi)
            .ok_or_else(|| SyntheticError::NotVisible("image corner rays miss the ground".into()))?;
        rpcs.push(fit_rpc_oracle(cam, &vol)?);
        fit_volumes.push(vol);
    }

    let mut images = Vec::with_capacity(cameras.len());
    let mut gt_height = Vec::with_capacity(cameras.len());
    let mut gt_transient_masks = Vec::with_capacity(cameras.len());
    for (v, cam) in cameras.iter().enumerate() {
        let (mut img, hts) = render_view(cam, &terrain, spec);
        let mut mask = TransientMask::all_stable(n, n);
        for t in spec.transients.iter().filter(|t| t.view == v) {
            let [r0, c0, r1, c1] = t.rect;
            let seed = spec.seed ^ 0xb10b ^ ((v as u64) << 32);
            for r in r0..r1 {
                for c in c0..c1 {
                    let idx = r * n + c;
                    let pattern = value_noise([c as f64 / 3.0, r as f64 / 3.0, 0.5], seed);
                    for (k, px) in img.pixel_mut(idx).iter_mut().enumerate() {
                        *px = (t.color[k] * (0.7 + 0.3 * pattern)) as f32;
                    }
                    mask.stable[idx] = false;
                }
            }
        }
        if let Some(rad) = spec.radiometric.get(v) {
            img = img.map_in_place(|x| (rad.gain * x as f64 + rad.bias) as f32);
        }
        images.push(img);
        gt_height.push(hts);
        gt_transient_masks.push(mask);
    }

    let grid = spec.dsm_grid();
    let sub = 4;
    let gt_dsm = DsmGrid::from_fn(grid, |r, c| {
        let mut top = f64::NEG_INFINITY;
        for i in 0..sub {
            for j in 0..sub {
                let e = grid.west + (c as f64 + (j as f64 + 0.5) / sub as f64) * grid.cell_size;
                let nn = grid.north - (r as f64 + (i as f64 + 0.5) / sub as f64) * grid.cell_size;
                top = top.max(terrain.height_at(e, nn));
            }
        }
        Some(top as f32)
    });

    Ok(SceneBundle {
        spec: spec.clone(),
        images,
        rpcs,
        cameras,
        gt_height,
        gt_dsm,
        gt_transient_masks,
        fit_volumes,
        terrain,
    })
}

/// File names inside a bundle directory.
#[derive(Debug, Clone)]
pub struct BundleLayout {
    pub dir: PathBuf,
    pub n_views: usize,
}

impl BundleLayout {
    pub fn new(dir: &Path, n_views: usize) -> Self {
        Self {
            dir: dir.to_path_buf(),
            n_views,
        }
    }

    pub fn image(&self, v: usize) -> PathBuf {
        self.dir.join(format!("view_{v}.png"))
    }

    pub fn rpc(&self, v: usize) -> PathBuf {
        self.dir.join(format!("view_{v}.rpc.json"))
    }

    pub fn gt_height(&self, v: usize) -> PathBuf {
        self.dir.join(format!("gt_height_{v}.skyr"))
    }

    pub fn gt_mask(&self, v: usize) -> PathBuf {
        self.dir.join(format!("gt_mask_{v}.skyr"))
    }

    pub fn gt_dsm(&self) -> PathBuf {
        self.dir.join("gt_dsm.skyr")
    }

    pub fn spec(&self) -> PathBuf {
        self.dir.join("spec.json")
    }
}

/// Writes images (PNG), cameras, ground-truth rasters (SKYR), the DSM and
/// the scene spec into `dir`.
pub fn write_bundle(bundle: &SceneBundle, dir: &Path) -> Result<BundleLayout, SyntheticError> {
    let io = |e: String| SyntheticError::Io(e);
    std::fs::create_dir_all(dir).map_err(|e| io(format!("{}: {e}", dir.display())))?;
    let layout = BundleLayout::new(dir, bundle.images.len());
    for v in 0..bundle.images.len() {
        save_raster(&bundle.images[v], &layout.image(v)).map_err(|e| io(e.to_string()))?;
        save_raster(&bundle.gt_height[v], &layout.gt_height(v)).map_err(|e| io(e.to_string()))?;
        save_raster(&bundle.gt_transient_masks[v].to_raster(), &layout.gt_mask(v))
            .map_err(|e| io(e.to_string()))?;
        std::fs::write(layout.rpc(v), serialize_rpc(&bundle.rpcs[v]))
            .map_err(|e| io(format!("{}: {e}", layout.rpc(v).display())))?;
    }
    write_dsm(&bundle.gt_dsm, &layout.gt_dsm()).map_err(|e| io(e.to_string()))?;
    let spec = serde_json::to_string_pretty(&bundle.spec).expect("spec serializes");
    std::fs::write(layout.spec(), spec).map_err(|e| io(format!("{}: {e}", layout.spec().display())))?;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(relief: Relief) -> SceneSpec {
        SceneSpec {
            image_size: 48,
            extent: 12.0,
            relief,
            ..Default::default()
        }
    }

    #[test]
    fn flat_scene_dsm() {
        let b = generate(&small(Relief::Flat { height: 10.0 })).unwrap();
        assert!(b.gt_dsm.heights.iter().all(|&h| h == 10.0));
        for h in &b.gt_height {
            assert!(h.data().iter().all(|&v| (v - 10.0).abs() < 1e-4));
        }
    }

    #[test]
    fn buildings_dsm_max() {
        let spec = small(Relief::Buildings {
            count: 3,
            ground: 5.0,
            h_min: 8.0,
            h_max: 14.0,
        });
        let b = generate(&spec).unwrap();
        let tallest = b.terrain.buildings().iter().map(|x| x.roof).fold(0.0, f64::max);
        assert_eq!(b.gt_dsm.max_height().unwrap(), tallest as f32);
    }

    #[test]
    fn deterministic() {
        let spec = small(Relief::Fractal {
            octaves: 3,
            base: 10.0,
            amplitude: 2.0,
        });
        let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(a.images, b.images);
        assert_eq!(a.rpcs, b.rpcs);
        assert_eq!(a.gt_height, b.gt_height);
        assert_eq!(a.gt_dsm, b.gt_dsm);
    }

    #[test]
    fn gt_heights_are_consistent_with_rpcs() {
        let b = generate(&small(Relief::default())).unwrap();
        // the RPC lifts a pixel at its GT height onto the camera ray
        for (v, rpc) in b.rpcs.iter().enumerate() {
            for (r, c) in [(3, 5), (24, 24), (40, 11)] {
                let h = b.gt_height[v].get(r, c, 0) as f64;
                let px = PixelCoord::new(c as f64, r as f64);
                let g = rpc.localize(px, h).unwrap();
                let want = b.cameras[v].localize_plane(px, h).unwrap();
                assert!((g.lat - want.lat).abs() < 1e-9 && (g.lon - want.lon).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transients_and_radiometry() {
        let mut spec = small(Relief::Flat { height: 3.0 });
        spec.transients = vec![Transient {
            view: 1,
            rect: [4, 6, 10, 16],
            color: [0.9, 0.1, 0.1],
        }];
        spec.radiometric = vec![
            Radiometric { gain: 1.0, bias: 0.0 },
            Radiometric { gain: 1.0, bias: 0.0 },
            Radiometric { gain: 0.5, bias: 0.1 },
        ];
        let b = generate(&spec).unwrap();
        assert_eq!(b.gt_transient_masks[1].transient_count(), 60);
        assert_eq!(b.gt_transient_masks[0].transient_count(), 0);
        let plain = generate(&SceneSpec {
            radiometric: vec![],
            transients: vec![],
            ..spec.clone()
        })
        .unwrap();
        for (x, y) in b.images[2].data().iter().zip(plain.images[2].data()) {
            assert!((x - (0.5 * y + 0.1)).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = SceneSpec::default();
        s.gsd = 0.0;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::default();
        s.transients.push(Transient {
            view: 5,
            rect: [0, 0, 1, 1],
            color: [0.0; 3],
        });
        assert!(matches!(generate(&s), Err(SyntheticError::BadSpec(_))));
    }

    #[test]
    fn bundle_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate(&small(Relief::Flat { height: 2.0 })).unwrap();
        let layout = write_bundle(&b, dir.path()).unwrap();
        for v in 0..3 {
            assert!(layout.image(v).exists() && layout.rpc(v).exists());
        }
        let text = std::fs::read_to_string(layout.spec()).unwrap();
        let spec: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, b.spec);
    }
}
