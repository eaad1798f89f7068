//! Row-major float rasters with an optional validity mask.

mod png_io;
mod skyr;

use std::path::Path;

use thiserror::Error;

pub use png_io::{decode_png, encode_png};
pub use skyr::{decode_skyr, encode_skyr};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("not a SKYR raster (bad magic)")]
    MagicMismatch,
    #[error("truncated raster file")]
    TruncatedFile,
    #[error("malformed raster header: {0}")]
    BadHeader(String),
    #[error("unsupported PNG: {0}")]
    UnsupportedPng(String),
    #[error("raster shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported channel count {0}")]
    BadChannelCount(usize),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// An `height × width × channels` float raster, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterF32 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    valid: Option<Vec<bool>>,
}

impl RasterF32 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty raster");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            valid: None,
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, RasterError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(RasterError::ShapeMismatch("zero dimension".into()));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| RasterError::ShapeMismatch("dimension overflow".into()))?;
        if data.len() != expected {
            return Err(RasterError::ShapeMismatch(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            valid: None,
        })
    }

    /// Builds a raster from a per-pixel function.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut r = Self::zeros(height, width, channels);
        for row in 0..height {
            for col in 0..width {
                for ch in 0..channels {
                    r.data[(row * width + col) * channels + ch] = f(row, col, ch);
                }
            }
        }
        r
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self, RasterError> {
        if mask.len() != self.height * self.width {
            return Err(RasterError::ShapeMismatch("mask length".into()));
        }
        self.valid = Some(mask);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    /// Mutable access to the validity mask, materializing an all-valid mask
    /// on first use.
    pub fn mask_mut(&mut self) -> &mut [bool] {
        let n = self.height * self.width;
        self.valid.get_or_insert_with(|| vec![true; n])
    }

    pub fn clear_mask(&mut self) {
        self.valid = None;
    }

    pub fn same_shape(&self, other: &RasterF32) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn same_dims(&self, other: &RasterF32) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn is_valid_at(&self, idx: usize) -> bool {
        self.valid.as_ref().is_none_or(|m| m[idx])
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.is_valid_at(self.index(row, col))
    }

    pub fn set_valid(&mut self, row: usize, col: usize, valid: bool) {
        let idx = self.index(row, col);
        self.mask_mut()[idx] = valid;
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        let c = self.channels;
        self.data[(row * self.width + col) * c + ch] = v;
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, idx: usize) -> &mut [f32] {
        let c = self.channels;
        &mut self.data[idx * c..(idx + 1) * c]
    }

    pub fn valid_count(&self) -> usize {
        match &self.valid {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => self.pixel_count(),
        }
    }

    /// Single channel copy of channel `ch`, mask preserved.
    pub fn channel(&self, ch: usize) -> RasterF32 {
        let mut out = Self::zeros(self.height, self.width, 1);
        for (o, px) in out.data.iter_mut().zip(self.data.chunks_exact(self.channels)) {
            *o = px[ch];
        }
        out.valid = self.valid.clone();
        out
    }

    /// Bilinear sample at image position (`u` column, `v` row), writing
    /// `channels` values into `out`. Returns false when any contributing
    /// neighbour is outside the raster or invalid.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f32]) -> bool {
        // Positions within EDGE_SLACK of the border snap onto it so that
        // round-trip noise does not knock edge pixels out.
        const EDGE_SLACK: f64 = 1e-6;
        let (w, h) = (self.width as f64, self.height as f64);
        if !(u >= -EDGE_SLACK && v >= -EDGE_SLACK && u <= w - 1.0 + EDGE_SLACK && v <= h - 1.0 + EDGE_SLACK)
        {
            return false;
        }
        let u = u.clamp(0.0, w - 1.0);
        let v = v.clamp(0.0, h - 1.0);
        let c0 = (u.floor() as usize).min(self.width - 1);
        let r0 = (v.floor() as usize).min(self.height - 1);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let c1 = if fu > 0.0 { c0 + 1 } else { c0 };
        let r1 = if fv > 0.0 { r0 + 1 } else { r0 };
        let idx = [
            self.index(r0, c0),
            self.index(r0, c1),
            self.index(r1, c0),
            self.index(r1, c1),
        ];
        if idx.iter().any(|&i| !self.is_valid_at(i)) {
            return false;
        }
        let wts = [
            (1.0 - fu) * (1.0 - fv),
            fu * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * fv,
        ];
        let ch = self.channels;
        for (k, o) in out.iter_mut().enumerate().take(ch) {
            let mut acc = 0.0f64;
            for (i, wt) in idx.iter().zip(wts) {
                acc += wt * self.data[i * ch + k] as f64;
            }
            *o = acc as f32;
        }
        true
    }

    /// Applies `f` to every stored value.
    pub fn map_in_place(mut self, f: impl Fn(f32) -> f32) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    /// Converts to a single luminance channel (mean of the channels).
    pub fn to_gray(&self) -> RasterF32 {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Self::zeros(self.height, self.width, 1);
        let inv = 1.0 / self.channels as f32;
        for (o, px) in out.data.iter_mut().zip(self.data.chunks_exact(self.channels)) {
            *o = px.iter().sum::<f32>() * inv;
        }
        out.valid = self.valid.clone();
        out
    }
}

/// Reads a raster from disk. `.png` files are decoded as 8-bit images scaled
/// to [0, 1]; everything else is read as SKYR.
pub fn load_raster(path: &Path) -> Result<RasterF32, RasterError> {
    let bytes = std::fs::read(path).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if is_png_path(path) {
        decode_png(&bytes)
    } else {
        decode_skyr(&bytes)
    }
}

/// Writes a raster; `.png` paths are quantized to 8 bits, other paths get
/// the lossless SKYR encoding.
pub fn save_raster(raster: &RasterF32, path: &Path) -> Result<(), RasterError> {
    let bytes = if is_png_path(path) {
        encode_png(raster)?
    } else {
        encode_skyr(raster)
    };
    std::fs::write(path, bytes).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn is_png_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_at_grid_points_and_midpoints() {
        let r = RasterF32::from_fn(3, 4, 2, |row, col, ch| (row * 10 + col) as f32 + ch as f32 * 100.0);
        let mut out = [0.0; 2];
        assert!(r.sample_bilinear(2.0, 1.0, &mut out));
        assert_eq!(out, [12.0, 112.0]);
        assert!(r.sample_bilinear(2.5, 1.5, &mut out));
        assert!((out[0] - 17.5).abs() < 1e-6);
        assert!(r.sample_bilinear(3.0, 2.0, &mut out));
        assert_eq!(out[0], 23.0);
        assert!(!r.sample_bilinear(3.01, 0.0, &mut out));
        assert!(r.sample_bilinear(3.0 + 1e-9, -1e-9, &mut out));
        assert_eq!(out[0], 3.0);
        assert!(!r.sample_bilinear(-0.01, 0.0, &mut out));
        assert!(!r.sample_bilinear(f64::NAN, 0.0, &mut out));
    }

    #[test]
    fn bilinear_respects_mask() {
        let mut r = RasterF32::filled(3, 3, 1, 1.0);
        r.set_valid(1, 1, false);
        let mut out = [0.0];
        assert!(!r.sample_bilinear(0.5, 0.5, &mut out));
        assert!(r.sample_bilinear(0.0, 0.0, &mut out));
        assert!(!r.sample_bilinear(1.0, 1.0, &mut out));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(RasterF32::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(RasterF32::from_vec(2, 2, 1, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn save_load_paths() {
        let dir = tempfile::tempdir().unwrap();
        let r = RasterF32::from_fn(7, 5, 3, |a, b, c| (a * 31 + b * 7 + c) as f32 * 0.37 - 3.0);
        let p = dir.path().join("x.skyr");
        save_raster(&r, &p).unwrap();
        assert_eq!(load_raster(&p).unwrap(), r);
        let err = load_raster(&dir.path().join("missing.skyr")).unwrap_err();
        assert!(matches!(err, RasterError::Io { .. }));
    }
}
