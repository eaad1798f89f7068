use std::path::{Path, PathBuf};

use skysplat_core::aggregation::parse_dsm_sidecar;
use skysplat_core::gaussians::{decode_skgs, encode_skgs};
use skysplat_core::raster::{decode_png, decode_skyr, encode_skyr};
use skysplat_core::rpc::{parse_pinhole, parse_rpc, serialize_rpc};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(p: &Path, b: &[u8]) -> String {
    String::from_utf8(b.to_vec()).unwrap_or_else(|_| panic!("{} is not UTF-8", p.display()))
}

#[test]
fn rpc_seeds_parse_and_round_trip() {
    for (p, b) in seeds("rpc_json") {
        let rpc = parse_rpc(&text(&p, &b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(parse_rpc(&serialize_rpc(&rpc)).unwrap(), rpc);
    }
}

#[test]
fn pinhole_seeds_parse() {
    for (p, b) in seeds("pinhole_json") {
        parse_pinhole(&text(&p, &b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn sidecar_seeds_parse() {
    for (p, b) in seeds("dsm_sidecar") {
        parse_dsm_sidecar(&text(&p, &b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn skyr_seeds_decode_and_round_trip() {
    for (p, b) in seeds("skyr") {
        let r = decode_skyr(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(decode_skyr(&encode_skyr(&r)).unwrap(), r);
    }
}

#[test]
fn skgs_seeds_decode_and_round_trip() {
    for (p, b) in seeds("skgs") {
        let set = decode_skgs(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(encode_skgs(&set), b, "{}", p.display());
    }
}

#[test]
fn png_seeds_decode() {
    for (p, b) in seeds("png") {
        decode_png(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
