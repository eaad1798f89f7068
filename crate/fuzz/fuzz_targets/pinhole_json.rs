#![no_main]

use libfuzzer_sys::fuzz_target;
use skysplat_core::rpc::parse_pinhole;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(fit) = parse_pinhole(text) {
        let _ = fit.project([0.0, 0.0, 0.0]);
        let _ = fit.forward();
    }
});
