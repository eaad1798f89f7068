use std::io::Cursor;

use super::{RasterError, RasterF32};

const PNG_DECODE_LIMIT: usize = 256 << 20;

/// Decodes an 8-bit grayscale or RGB PNG into [0, 1] floats.
pub fn decode_png(bytes: &[u8]) -> Result<RasterF32, RasterError> {
    let decoder = png::Decoder::new_with_limits(
        Cursor::new(bytes),
        png::Limits {
            bytes: PNG_DECODE_LIMIT,
        },
    );
    let mut reader = decoder
        .read_info()
        .map_err(|e| RasterError::UnsupportedPng(e.to_string()))?;
    let info = reader.info();
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(RasterError::UnsupportedPng(format!("color type {other:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(RasterError::UnsupportedPng(format!(
            "bit depth {:?}",
            info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RasterError::UnsupportedPng("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| RasterError::UnsupportedPng(e.to_string()))?;
    let line = frame.line_size;
    let mut data = Vec::with_capacity(width * height * channels);
    for row in buf.chunks(line).take(height) {
        data.extend(row[..width * channels].iter().map(|&b| b as f32 / 255.0));
    }
    RasterF32::from_vec(height, width, channels, data)
}

/// Encodes a 1- or 3-channel raster as an 8-bit PNG, clamping to [0, 1].
/// Invalid pixels are written as 0.
pub fn encode_png(r: &RasterF32) -> Result<Vec<u8>, RasterError> {
    let color = match r.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(RasterError::BadChannelCount(c)),
    };
    let mut bytes = Vec::with_capacity(r.data().len());
    for idx in 0..r.pixel_count() {
        let valid = r.is_valid_at(idx);
        for &v in r.pixel(idx) {
            let q = if valid && v.is_finite() {
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            };
            bytes.push(q);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width() as u32, r.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| RasterError::UnsupportedPng(e.to_string()))?;
        w.write_image_data(&bytes)
            .map_err(|e| RasterError::UnsupportedPng(e.to_string()))?;
    }
    Ok(out)
}
