//! `SKGS1` binary table: magic line, little-endian u64 count, then 14
//! little-endian f32 per Gaussian (center, scale, quaternion, SH0, alpha).
//! The frame origin is stored after the count as three f64 (lat, lon, hei).

use super::{Gaussian, GaussianError, GaussianSet};
use crate::geo::GeoPoint;

pub const SKGS_MAGIC: &[u8; 6] = b"SKGS1\n";
const FLOATS_PER_GAUSSIAN: usize = 14;
const HEADER_LEN: usize = 6 + 8 + 24;

pub fn encode_skgs(set: &GaussianSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * FLOATS_PER_GAUSSIAN * 4);
    out.extend_from_slice(SKGS_MAGIC);
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    let o = set.frame.origin;
    for v in [o.lat, o.lon, o.hei] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in &set.gaussians {
        let vals = g
            .mu
            .iter()
            .chain(&g.scale)
            .chain(&g.rot)
            .chain(&g.sh0)
            .chain([&g.alpha]);
        for v in vals {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_skgs(bytes: &[u8]) -> Result<GaussianSet, GaussianError> {
    if bytes.len() < SKGS_MAGIC.len() || &bytes[..SKGS_MAGIC.len()] != SKGS_MAGIC {
        return Err(GaussianError::Format("bad magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(GaussianError::Format("truncated header".into()));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
    let origin = GeoPoint::new(f64_at(14), f64_at(22), f64_at(30));
    if !origin.is_finite() {
        return Err(GaussianError::Format("non-finite origin".into()));
    }
    let body = &bytes[HEADER_LEN..];
    let expected = usize::try_from(count)
        .ok()
        .and_then(|n| n.checked_mul(FLOATS_PER_GAUSSIAN * 4))
        .ok_or_else(|| GaussianError::Format(format!("count {count} too large")))?;
    if body.len() != expected {
        return Err(GaussianError::Format(format!(
            "{} body bytes for {count} Gaussians",
            body.len()
        )));
    }
    let mut gaussians = Vec::with_capacity(count as usize);
    for (index, rec) in body.chunks_exact(FLOATS_PER_GAUSSIAN * 4).enumerate() {
        let mut v = [0.0f64; FLOATS_PER_GAUSSIAN];
        for (k, b) in rec.chunks_exact(4).enumerate() {
            v[k] = f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
        }
        // f32 storage loses quaternion normalization; restore it
        let qn = (v[6] * v[6] + v[7] * v[7] + v[8] * v[8] + v[9] * v[9]).sqrt();
        if !(qn > 0.5 && qn < 1.5) {
            return Err(GaussianError::InvalidGaussian {
                index,
                reason: format!("quaternion norm {qn}"),
            });
        }
        let g = Gaussian {
            mu: [v[0], v[1], v[2]],
            scale: [v[3], v[4], v[5]],
            rot: [v[6] / qn, v[7] / qn, v[8] / qn, v[9] / qn],
            sh0: [v[10], v[11], v[12]],
            alpha: v[13],
        };
        g.validate()
            .map_err(|reason| GaussianError::InvalidGaussian { index, reason })?;
        gaussians.push(g);
    }
    Ok(GaussianSet::new(origin, gaussians))
}
