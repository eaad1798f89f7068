use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AggregationError, ReliablePoint};
use crate::geo::{GeoPoint, LocalFrame};
use crate::raster::{load_raster, save_raster, RasterF32};

pub const DEFAULT_NODATA: f32 = -9999.0;

/// North-up raster grid in the local ENU frame anchored at `origin`.
/// `west` and `north` are the ENU coordinates (meters) of the grid's outer
/// north-west corner; row indices grow southward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: GeoPoint,
    pub west: f64,
    pub north: f64,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), AggregationError> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(AggregationError::BadGrid(format!("cell_size {}", self.cell_size)));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(AggregationError::BadGrid("zero rows or cols".into()));
        }
        if self.rows.checked_mul(self.cols).is_none_or(|n| n > 1 << 28) {
            return Err(AggregationError::BadGrid("grid too large".into()));
        }
        if !(self.origin.is_finite() && self.west.is_finite() && self.north.is_finite()) {
            return Err(AggregationError::BadGrid("non-finite placement".into()));
        }
        Ok(())
    }

    pub fn frame(&self) -> LocalFrame {
        LocalFrame::new(self.origin)
    }

    /// Smallest grid aligned to `cell_size` multiples that covers every
    /// point horizontally.
    pub fn covering(points: &[ReliablePoint], origin: GeoPoint, cell_size: f64) -> Option<Self> {
        let frame = LocalFrame::new(origin);
        let (mut e0, mut e1, mut n0, mut n1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in points {
            let [e, n, _] = frame.to_enu(&p.geo);
            e0 = e0.min(e);
            e1 = e1.max(e);
            n0 = n0.min(n);
            n1 = n1.max(n);
        }
        if points.is_empty() || !(cell_size > 0.0) {
            return None;
        }
        let west = (e0 / cell_size).floor() * cell_size;
        let north = (n1 / cell_size).floor() * cell_size + cell_size;
        let cols = ((e1 - west) / cell_size).floor() as usize + 1;
        let rows = ((north - n0) / cell_size).ceil().max(1.0) as usize;
        Some(Self {
            origin,
            west,
            north,
            cell_size,
            rows,
            cols,
        })
    }

    /// Cell containing the horizontal ENU position, if inside the grid.
    pub fn cell_of(&self, east: f64, north: f64) -> Option<(usize, usize)> {
        let c = ((east - self.west) / self.cell_size).floor();
        let r = ((self.north - north) / self.cell_size).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < self.cols && (r as usize) < self.rows {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.west + (col as f64 + 0.5) * self.cell_size,
            self.north - (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Same placement up to floating-point noise.
    pub fn coregistered(&self, other: &GridSpec) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        self.rows == other.rows
            && self.cols == other.cols
            && close(self.cell_size, other.cell_size)
            && close(self.west, other.west)
            && close(self.north, other.north)
            && close(self.origin.lat, other.origin.lat)
            && close(self.origin.lon, other.origin.lon)
            && close(self.origin.hei, other.origin.hei)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsmGrid {
    pub spec: GridSpec,
    /// Row-major absolute heights; `nodata` marks empty cells.
    pub heights: Vec<f32>,
    pub nodata: f32,
}

impl DsmGrid {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            heights: vec![DEFAULT_NODATA; spec.rows * spec.cols],
            nodata: DEFAULT_NODATA,
        }
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> Option<f32>) -> Self {
        let mut g = Self::empty(spec);
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                if let Some(h) = f(r, c) {
                    g.heights[r * spec.cols + c] = h;
                }
            }
        }
        g
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f32> {
        let h = self.heights[row * self.spec.cols + col];
        (h != self.nodata).then_some(h)
    }

    pub fn data_count(&self) -> usize {
        self.heights.iter().filter(|&&h| h != self.nodata).count()
    }

    pub fn max_height(&self) -> Option<f32> {
        self.heights
            .iter()
            .filter(|&&h| h != self.nodata)
            .copied()
            .reduce(f32::max)
    }

    /// Single-channel raster with no-data cells masked invalid.
    pub fn to_raster(&self) -> RasterF32 {
        let mask = self.heights.iter().map(|&h| h != self.nodata).collect();
        RasterF32::from_vec(self.spec.rows, self.spec.cols, 1, self.heights.clone())
            .and_then(|r| r.with_mask(mask))
            .expect("grid dimensions")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CellReduce {
    #[default]
    Max,
    /// Diagnostics only.
    Median,
}

/// Per-cell maximum of the points dropped vertically onto the grid.
pub fn rasterize_dsm(points: &[ReliablePoint], spec: &GridSpec) -> Result<DsmGrid, AggregationError> {
    rasterize_dsm_with(points, spec, CellReduce::Max)
}

pub fn rasterize_dsm_with(
    points: &[ReliablePoint],
    spec: &GridSpec,
    reduce: CellReduce,
) -> Result<DsmGrid, AggregationError> {
    spec.validate()?;
    if points.is_empty() {
        return Err(AggregationError::EmptyPointSet);
    }
    let frame = spec.frame();
    let mut buckets: Vec<Vec<f32>> = vec![Vec::new(); spec.rows * spec.cols];
    let mut landed = 0usize;
    for p in points {
        let [e, n, _] = frame.to_enu(&p.geo);
        if let Some((r, c)) = spec.cell_of(e, n) {
            buckets[r * spec.cols + c].push(p.geo.hei as f32);
            landed += 1;
        }
    }
    if landed == 0 {
        return Err(AggregationError::EmptyPointSet);
    }
    let mut grid = DsmGrid::empty(*spec);
    for (cell, b) in grid.heights.iter_mut().zip(buckets.iter_mut()) {
        if b.is_empty() {
            continue;
        }
        *cell = match reduce {
            CellReduce::Max => b.iter().copied().fold(f32::MIN, f32::max),
            CellReduce::Median => {
                b.sort_by(f32::total_cmp);
                b[b.len() / 2]
            }
        };
    }
    Ok(grid)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    spec: GridSpec,
    nodata: f32,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Parses the JSON placement sidecar of a DSM raster.
pub fn parse_dsm_sidecar(text: &str) -> Result<(GridSpec, f32), AggregationError> {
    let s: Sidecar =
        serde_json::from_str(text).map_err(|e| AggregationError::Io(format!("sidecar: {e}")))?;
    s.spec.validate()?;
    Ok((s.spec, s.nodata))
}

/// Writes the heights to `path` (SKYR or PNG by extension) and the grid
/// placement to `<path>.json`.
pub fn write_dsm(grid: &DsmGrid, path: &Path) -> Result<(), AggregationError> {
    save_raster(&grid.to_raster(), path).map_err(|e| AggregationError::Io(e.to_string()))?;
    let side = Sidecar {
        spec: grid.spec,
        nodata: grid.nodata,
    };
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    std::fs::write(sidecar_path(path), text)
        .map_err(|e| AggregationError::Io(format!("{}: {e}", sidecar_path(path).display())))
}

pub fn read_dsm(path: &Path) -> Result<DsmGrid, AggregationError> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| AggregationError::Io(format!("{}: {e}", side.display())))?;
    let (spec, nodata) = parse_dsm_sidecar(&text)?;
    let r = load_raster(path).map_err(|e| AggregationError::Io(e.to_string()))?;
    if r.dims() != (spec.rows, spec.cols) || r.channels() != 1 {
        return Err(AggregationError::BadGrid(format!(
            "raster {:?} does not match sidecar {}x{}",
            r.dims(),
            spec.rows,
            spec.cols
        )));
    }
    let heights = (0..r.pixel_count())
        .map(|i| if r.is_valid_at(i) { r.data()[i] } else { nodata })
        .collect();
    Ok(DsmGrid {
        spec,
        heights,
        nodata,
    })
}
