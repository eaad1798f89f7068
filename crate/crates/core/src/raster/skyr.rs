//! SKYR raster encoding.
//!
//! ```text
//! "SKYR1\n"
//! "<H> <W> <C>\n"
//! H*W*C little-endian f32, row-major, channels interleaved
//! optional: "MASK\n" then H*W bytes, each 0 or 1
//! ```

use super::{RasterError, RasterF32};

const MAGIC: &[u8] = b"SKYR1\n";
const MASK_TAG: &[u8] = b"MASK\n";
const MAX_HEADER: usize = 64;

pub fn encode_skyr(r: &RasterF32) -> Vec<u8> {
    let header = format!("{} {} {}\n", r.height(), r.width(), r.channels());
    let mut out = Vec::with_capacity(
        MAGIC.len() + header.len() + r.data().len() * 4 + MASK_TAG.len() + r.pixel_count(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    for v in r.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(mask) = r.mask() {
        out.extend_from_slice(MASK_TAG);
        out.extend(mask.iter().map(|&m| m as u8));
    }
    out
}

pub fn decode_skyr(bytes: &[u8]) -> Result<RasterF32, RasterError> {
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(RasterError::TruncatedFile)
        } else {
            Err(RasterError::MagicMismatch)
        };
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(RasterError::MagicMismatch);
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| {
            if rest.len() < MAX_HEADER {
                RasterError::TruncatedFile
            } else {
                RasterError::BadHeader("header line too long".into())
            }
        })?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| RasterError::BadHeader("non-ASCII header".into()))?;
    let dims: Vec<usize> = header
        .split(' ')
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| RasterError::BadHeader(format!("`{header}`")))?;
    let [h, w, c] = dims[..] else {
        return Err(RasterError::BadHeader(format!("`{header}`")));
    };
    if h == 0 || w == 0 || c == 0 {
        return Err(RasterError::BadHeader("zero dimension".into()));
    }
    let n_pixels = h
        .checked_mul(w)
        .ok_or_else(|| RasterError::BadHeader("dimension overflow".into()))?;
    let n_bytes = n_pixels
        .checked_mul(c)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| RasterError::BadHeader("dimension overflow".into()))?;

    let body = &rest[nl + 1..];
    if body.len() < n_bytes {
        return Err(RasterError::TruncatedFile);
    }
    let data: Vec<f32> = body[..n_bytes]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let raster = RasterF32::from_vec(h, w, c, data)?;

    let tail = &body[n_bytes..];
    if tail.is_empty() {
        return Ok(raster);
    }
    if tail.len() < MASK_TAG.len() {
        return if MASK_TAG.starts_with(tail) {
            Err(RasterError::TruncatedFile)
        } else {
            Err(RasterError::BadHeader("trailing bytes".into()))
        };
    }
    if &tail[..MASK_TAG.len()] != MASK_TAG {
        return Err(RasterError::BadHeader("trailing bytes".into()));
    }
    let mask_bytes = &tail[MASK_TAG.len()..];
    if mask_bytes.len() < n_pixels {
        return Err(RasterError::TruncatedFile);
    }
    if mask_bytes.len() > n_pixels {
        return Err(RasterError::BadHeader("trailing bytes after mask".into()));
    }
    let mask = mask_bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(RasterError::BadHeader(format!("mask byte {b}"))),
        })
        .collect::<Result<Vec<bool>, _>>()?;
    raster.with_mask(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrong_magic() {
        assert!(matches!(
            decode_skyr(b"SKYR2\n1 1 1\n\0\0\0\0"),
            Err(RasterError::MagicMismatch)
        ));
        assert!(matches!(decode_skyr(b"PNG"), Err(RasterError::MagicMismatch)));
    }

    #[test]
    fn truncated_payload() {
        let r = RasterF32::filled(4, 4, 2, 0.5);
        let bytes = encode_skyr(&r);
        assert!(matches!(
            decode_skyr(&bytes[..bytes.len() - 1]),
            Err(RasterError::TruncatedFile)
        ));
        assert!(matches!(decode_skyr(b"SKY"), Err(RasterError::TruncatedFile)));
        assert!(matches!(decode_skyr(b"SKYR1\n4 4"), Err(RasterError::TruncatedFile)));
    }

    #[test]
    fn truncated_mask() {
        let mut r = RasterF32::filled(2, 3, 1, 0.5);
        r.set_valid(0, 1, false);
        let bytes = encode_skyr(&r);
        assert!(matches!(
            decode_skyr(&bytes[..bytes.len() - 2]),
            Err(RasterError::TruncatedFile)
        ));
    }

    #[test]
    fn bad_headers() {
        for h in [
            &b"SKYR1\n0 4 1\n"[..],
            b"SKYR1\n4 4\n",
            b"SKYR1\nfour 4 1\n",
            b"SKYR1\n99999999999 99999999999 99999999999\n",
        ] {
            assert!(matches!(decode_skyr(h), Err(RasterError::BadHeader(_))), "{h:?}");
        }
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let bytes = b"SKYR1\n100000 100000 100\n\0\0\0\0";
        assert!(matches!(decode_skyr(bytes), Err(RasterError::TruncatedFile)));
    }

    #[test]
    fn random_7x5x3_is_bit_equal() {
        let r = RasterF32::from_fn(7, 5, 3, |a, b, c| ((a * 131 + b * 17 + c * 3) as f32).sin() * 1e3);
        let back = decode_skyr(&encode_skyr(&r)).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            r.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    proptest! {
        #[test]
        fn round_trip_bits(
            h in 1usize..6, w in 1usize..6, c in 1usize..4,
            seed in proptest::collection::vec(any::<u32>(), 125),
            masked in any::<bool>(),
        ) {
            let n = h * w * c;
            let data: Vec<f32> = seed.iter().cycle().take(n).map(|&b| f32::from_bits(b)).collect();
            let mut r = RasterF32::from_vec(h, w, c, data).unwrap();
            if masked {
                let m: Vec<bool> = seed.iter().take(h * w).map(|b| b % 2 == 0).collect();
                r = r.with_mask(m).unwrap();
            }
            let back = decode_skyr(&encode_skyr(&r)).unwrap();
            prop_assert_eq!(back.mask(), r.mask());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = r.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
