#![no_main]

use libfuzzer_sys::fuzz_target;
use skysplat_core::aggregation::parse_dsm_sidecar;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((spec, _)) = parse_dsm_sidecar(text) {
        let _ = spec.cell_center(spec.rows - 1, spec.cols - 1);
    }
});
