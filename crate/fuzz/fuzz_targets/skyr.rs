#![no_main]

use libfuzzer_sys::fuzz_target;
use skysplat_core::raster::{decode_skyr, encode_skyr};

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = decode_skyr(data) {
        let again = decode_skyr(&encode_skyr(&r)).expect("encoded raster decodes");
        assert_eq!(again.dims(), r.dims());
        assert_eq!(again.channels(), r.channels());
    }
});
