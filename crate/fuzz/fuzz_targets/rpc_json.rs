#![no_main]

use libfuzzer_sys::fuzz_target;
use skysplat_core::rpc::{parse_rpc, serialize_rpc};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rpc) = parse_rpc(text) {
        // anything accepted must survive a round trip
        let again = parse_rpc(&serialize_rpc(&rpc)).expect("serialized RPC parses");
        assert_eq!(again, rpc);
    }
});
