//! `.rpc.json` reading and writing.

use serde_json::{Map, Value};

use super::{RpcError, RpcModel, RPC_TERMS};

const SCALAR_FIELDS: [&str; 10] = [
    "line_off",
    "samp_off",
    "lat_off",
    "lon_off",
    "hei_off",
    "line_scale",
    "samp_scale",
    "lat_scale",
    "lon_scale",
    "hei_scale",
];

fn scalar(obj: &Map<String, Value>, key: &str) -> Result<f64, RpcError> {
    obj.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| RpcError::Schema(key.to_string()))
}

fn coefficients(obj: &Map<String, Value>, key: &str) -> Result<[f64; RPC_TERMS], RpcError> {
    let arr = obj
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| RpcError::Schema(key.to_string()))?;
    if arr.len() != RPC_TERMS {
        return Err(RpcError::CoefficientCount {
            field: key.to_string(),
            len: arr.len(),
        });
    }
    let mut out = [0.0; RPC_TERMS];
    for (slot, v) in out.iter_mut().zip(arr) {
        *slot = v.as_f64().ok_or_else(|| RpcError::Schema(key.to_string()))?;
    }
    Ok(out)
}

/// Parses an RPC camera from its JSON representation.
pub fn parse_rpc(text: &str) -> Result<RpcModel, RpcError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| RpcError::Schema(format!("<document>: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| RpcError::Schema("<document>".into()))?;
    let mut s = [0.0; 10];
    for (slot, key) in s.iter_mut().zip(SCALAR_FIELDS) {
        *slot = scalar(obj, key)?;
    }
    let model = RpcModel {
        line_off: s[0],
        samp_off: s[1],
        lat_off: s[2],
        lon_off: s[3],
        hei_off: s[4],
        line_scale: s[5],
        samp_scale: s[6],
        lat_scale: s[7],
        lon_scale: s[8],
        hei_scale: s[9],
        line_num: coefficients(obj, "line_num")?,
        line_den: coefficients(obj, "line_den")?,
        samp_num: coefficients(obj, "samp_num")?,
        samp_den: coefficients(obj, "samp_den")?,
    };
    model.validate()?;
    Ok(model)
}

/// Serializes an RPC camera. Floats use shortest round-trip formatting, so
/// `parse_rpc(&serialize_rpc(m)) == m` bit for bit.
pub fn serialize_rpc(model: &RpcModel) -> String {
    serde_json::to_string_pretty(model).expect("RPC model is always serializable")
}

#[cfg(test)]
mod tests {
    use super::super::test_models::warped;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn missing_field_is_named() {
        let mut v: Value = serde_json::from_str(&serialize_rpc(&warped())).unwrap();
        v.as_object_mut().unwrap().remove("line_scale");
        let err = parse_rpc(&v.to_string()).unwrap_err();
        assert_eq!(err, RpcError::Schema("line_scale".into()));
    }

    #[test]
    fn short_coefficient_vector() {
        let mut v: Value = serde_json::from_str(&serialize_rpc(&warped())).unwrap();
        v["samp_den"].as_array_mut().unwrap().pop();
        let err = parse_rpc(&v.to_string()).unwrap_err();
        assert_eq!(
            err,
            RpcError::CoefficientCount {
                field: "samp_den".into(),
                len: 19
            }
        );
    }

    #[test]
    fn non_numeric_coefficient() {
        let mut v: Value = serde_json::from_str(&serialize_rpc(&warped())).unwrap();
        v["line_num"][3] = Value::String("x".into());
        assert_eq!(
            parse_rpc(&v.to_string()).unwrap_err(),
            RpcError::Schema("line_num".into())
        );
    }

    #[test]
    fn garbage_is_a_schema_error() {
        assert!(matches!(parse_rpc("[1,2"), Err(RpcError::Schema(_))));
        assert!(matches!(parse_rpc("42"), Err(RpcError::Schema(_))));
    }

    proptest! {
        #[test]
        fn serialize_parse_is_bit_exact(
            coefs in proptest::collection::vec(-1e3f64..1e3, 80),
            offs in proptest::collection::vec(-1e4f64..1e4, 5),
            scales in proptest::collection::vec(1e-6f64..1e4, 5),
        ) {
            let mut m = warped();
            m.line_off = offs[0]; m.samp_off = offs[1];
            m.lat_off = offs[2] / 200.0; m.lon_off = offs[3] / 100.0; m.hei_off = offs[4];
            m.line_scale = scales[0]; m.samp_scale = scales[1];
            m.lat_scale = scales[2]; m.lon_scale = scales[3]; m.hei_scale = scales[4];
            m.line_num.copy_from_slice(&coefs[0..20]);
            m.line_den.copy_from_slice(&coefs[20..40]);
            m.samp_num.copy_from_slice(&coefs[40..60]);
            m.samp_den.copy_from_slice(&coefs[60..80]);
            m.line_den[0] = 1.0;
            m.samp_den[0] = 1.0;
            let back = parse_rpc(&serialize_rpc(&m)).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
