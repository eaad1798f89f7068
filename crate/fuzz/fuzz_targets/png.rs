#![no_main]

use libfuzzer_sys::fuzz_target;
use skysplat_core::raster::{decode_png, encode_png};

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = decode_png(data) {
        if let Ok(bytes) = encode_png(&r) {
            let again = decode_png(&bytes).expect("encoded PNG decodes");
            assert_eq!(again.dims(), r.dims());
        }
    }
});
