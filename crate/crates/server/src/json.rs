//! Conversions for the JSON mirror under `/api/`.
//!
//! Parameters travel as a JSON object keyed by the method table's parameter
//! names. Base64 values are plain base64 strings in both directions.

use std::collections::HashMap;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{Map, Value};

use gridlet_core::methods::{MethodSpec, ParamKind};
use gridlet_core::rpc::{fault_code as fc, Fault, RpcValue};

fn bad(msg: String) -> Fault {
    Fault::new(fc::BAD_PARAMS, msg)
}

pub fn to_json(v: &RpcValue) -> Value {
    match v {
        RpcValue::String(s) => Value::String(s.clone()),
        RpcValue::Int(i) => Value::from(*i),
        RpcValue::Double(d) => serde_json::Number::from_f64(*d).map_or(Value::Null, Value::Number),
        RpcValue::Bool(b) => Value::Bool(*b),
        RpcValue::Base64(b) => Value::String(BASE64.encode(b)),
        RpcValue::Array(items) => Value::Array(items.iter().map(to_json).collect()),
        RpcValue::Struct(members) => Value::Object(
            members
                .iter()
                .map(|(k, v)| (k.clone(), to_json(v)))
                .collect::<Map<_, _>>(),
        ),
    }
}

/// Free-form JSON (struct parameters) to an RPC value.
fn from_json(v: &Value) -> Result<RpcValue, Fault> {
    Ok(match v {
        Value::Null => return Err(bad("null has no RPC representation".into())),
        Value::Bool(b) => RpcValue::Bool(*b),
        Value::Number(n) => match n.as_i64().and_then(|i| i32::try_from(i).ok()) {
            Some(i) => RpcValue::Int(i),
            None => RpcValue::Double(n.as_f64().unwrap_or(f64::NAN)),
        },
        Value::String(s) => RpcValue::String(s.clone()),
        Value::Array(items) => {
            RpcValue::Array(items.iter().map(from_json).collect::<Result<_, _>>()?)
        }
        Value::Object(m) => RpcValue::Struct(
            m.iter()
                .map(|(k, v)| Ok((k.clone(), from_json(v)?)))
                .collect::<Result<_, Fault>>()?,
        ),
    })
}

fn param(name: &str, kind: ParamKind, v: &Value) -> Result<RpcValue, Fault> {
    let wrong = || bad(format!("`{name}` must be {}", kind.name()));
    Ok(match kind {
        ParamKind::Str => RpcValue::String(v.as_str().ok_or_else(wrong)?.to_owned()),
        ParamKind::Int => {
            let i = match v {
                Value::String(s) => s.trim().parse::<i64>().ok(),
                _ => v.as_i64(),
            };
            RpcValue::Int(i.and_then(|i| i32::try_from(i).ok()).ok_or_else(wrong)?)
        }
        ParamKind::Double => {
            let d = match v {
                Value::String(s) => s.trim().parse::<f64>().ok(),
                _ => v.as_f64(),
            };
            RpcValue::Double(d.ok_or_else(wrong)?)
        }
        ParamKind::Bool => match v {
            Value::Bool(b) => RpcValue::Bool(*b),
            Value::String(s) if s == "true" || s == "1" => RpcValue::Bool(true),
            Value::String(s) if s == "false" || s == "0" => RpcValue::Bool(false),
            _ => return Err(wrong()),
        },
        ParamKind::Blob => {
            let s = v.as_str().ok_or_else(wrong)?;
            RpcValue::Base64(
                BASE64
                    .decode(s.trim())
                    .map_err(|e| bad(format!("`{name}`: {e}")))?,
            )
        }
        ParamKind::StrList => match v {
            Value::Array(items) => RpcValue::Array(
                items
                    .iter()
                    .map(|i| i.as_str().map(RpcValue::from).ok_or_else(wrong))
                    .collect::<Result<_, _>>()?,
            ),
            // query strings carry lists comma-separated
            Value::String(s) => RpcValue::Array(
                s.split(',')
                    .filter(|p| !p.is_empty())
                    .map(RpcValue::from)
                    .collect(),
            ),
            _ => return Err(wrong()),
        },
        ParamKind::Struct => match v {
            Value::Object(_) => from_json(v)?,
            _ => return Err(wrong()),
        },
    })
}

/// Builds positional parameters from a JSON object.
pub fn params_from_json(spec: &MethodSpec, body: &Value) -> Result<Vec<RpcValue>, Fault> {
    let empty = Map::new();
    let obj = match body {
        Value::Object(m) => m,
        Value::Null => &empty,
        _ => return Err(bad(format!("{}: body must be a JSON object", spec.name))),
    };
    if let Some(extra) = obj
        .keys()
        .find(|k| !spec.params.iter().any(|(n, _)| n == k))
    {
        return Err(bad(format!("{}: unexpected field `{extra}`", spec.name)));
    }
    spec.params
        .iter()
        .map(|(name, kind)| {
            let v = obj
                .get(*name)
                .ok_or_else(|| bad(format!("{}: missing field `{name}`", spec.name)))?;
            param(name, *kind, v)
        })
        .collect()
}

/// Query-string parameters as a JSON object of strings.
pub fn query_to_json(query: HashMap<String, String>) -> Value {
    Value::Object(
        query
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect(),
    )
}

pub fn fault_json(f: &Fault) -> Value {
    serde_json::json!({ "fault_code": f.code, "fault_string": f.message })
}

/// HTTP status for a fault on the JSON mirror.
pub fn fault_status(code: i32) -> u16 {
    match code {
        fc::INVALID_CREDENTIAL => 401,
        fc::ACCESS_DENIED => 403,
        fc::UNKNOWN_METHOD | fc::NOT_FOUND | fc::UNKNOWN_JOB | fc::UNKNOWN_PEER => 404,
        fc::DUPLICATE_JOB | fc::STALE_EPOCH => 409,
        fc::FORWARD_FAILED | fc::OWNER_UNREACHABLE | fc::INPUT_FETCH_FAILED => 502,
        fc::NO_FRESH_PEERS => 503,
        fc::INTERNAL | fc::EXECUTOR_FAILED => 500,
        _ => 400,
    }
}
