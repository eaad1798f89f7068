#![no_main]

use libfuzzer_sys::fuzz_target;
use skysplat_core::gaussians::{decode_skgs, encode_skgs};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_skgs(data) {
        let again = decode_skgs(&encode_skgs(&set)).expect("encoded set decodes");
        assert_eq!(again.len(), set.len());
    }
});
