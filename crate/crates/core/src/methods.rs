//! The table of RPC methods exposed by gridlet nodes.
//!
//! The table drives parameter checking, ACL scope validation, binary
//! response eligibility and the named-field JSON mirror.

use crate::rpc::RpcValue;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Str,
    Int,
    /// Accepts `i4` as well.
    Double,
    Bool,
    Blob,
    StrList,
    Struct,
}

impl ParamKind {
    pub fn accepts(self, v: &RpcValue) -> bool {
        match (self, v) {
            (ParamKind::Str, RpcValue::String(_))
            | (ParamKind::Int, RpcValue::Int(_))
            | (ParamKind::Double, RpcValue::Double(_) | RpcValue::Int(_))
            | (ParamKind::Bool, RpcValue::Bool(_))
            | (ParamKind::Blob, RpcValue::Base64(_))
            | (ParamKind::Struct, RpcValue::Struct(_)) => true,
            (ParamKind::StrList, RpcValue::Array(items)) => {
                items.iter().all(|i| matches!(i, RpcValue::String(_)))
            }
            _ => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Str => "string",
            ParamKind::Int => "i4",
            ParamKind::Double => "double",
            ParamKind::Bool => "boolean",
            ParamKind::Blob => "base64",
            ParamKind::StrList => "array of strings",
            ParamKind::Struct => "struct",
        }
    }
}

#[derive(Debug)]
pub struct MethodSpec {
    pub name: &'static str,
    pub params: &'static [(&'static str, ParamKind)],
    /// Eligible for raw binary responses.
    pub binary: bool,
}

impl MethodSpec {
    pub fn service(&self) -> &'static str {
        self.name
            .split_once('.')
            .map(|(s, _)| s)
            .unwrap_or(self.name)
    }

    /// Checks arity and parameter types, returning a readable complaint.
    pub fn check_params(&self, params: &[RpcValue]) -> Result<(), String> {
        if params.len() != self.params.len() {
            return Err(format!(
                "{} takes {} parameter(s), got {}",
                self.name,
                self.params.len(),
                params.len()
            ));
        }
        for ((name, kind), v) in self.params.iter().zip(params) {
            if !kind.accepts(v) {
                return Err(format!(
                    "{}: parameter `{name}` must be {}, got {}",
                    self.name,
                    kind.name(),
                    v.kind()
                ));
            }
        }
        Ok(())
    }
}

use ParamKind::*;

const fn m(
    name: &'static str,
    params: &'static [(&'static str, ParamKind)],
    binary: bool,
) -> MethodSpec {
    MethodSpec {
        name,
        params,
        binary,
    }
}

pub const METHODS: &[MethodSpec] = &[
    m("auth.login", &[("credential", Blob)], false),
    m(
        "acl.add",
        &[
            ("kind", Str),
            ("effect", Str),
            ("principal", Str),
            ("scope", Str),
        ],
        false,
    ),
    m("acl.remove", &[("id", Int)], false),
    m("acl.list", &[], false),
    m(
        "monitor.report",
        &[
            ("peer_url", Str),
            ("coefficient", Double),
            ("timestamp", Int),
            ("sample", Struct),
        ],
        false,
    ),
    m("peer.register", &[("peer_id", Str), ("url", Str)], false),
    m("peer.list", &[], false),
    m(
        "broker.announce",
        &[("url", Str), ("epoch", Int), ("peer_id", Str)],
        false,
    ),
    m("broker.role", &[], false),
    m("broker.sync", &[("snapshot", Struct)], false),
    m(
        "job.submit",
        &[
            ("job_name", Str),
            ("executable", Blob),
            ("submit_file", Blob),
            ("submit_file_name", Str),
            ("input_file_names", StrList),
        ],
        false,
    ),
    m(
        "job.accept",
        &[("job_id", Str), ("request", Struct), ("forwarder_url", Str)],
        false,
    ),
    m("job.status", &[("job_id", Str)], false),
    m("job.kill", &[("job_id", Str)], false),
    m("job.outputs", &[("job_id", Str)], false),
    m(
        "job.fetch",
        &[
            ("job_id", Str),
            ("run", Int),
            ("name", Str),
            ("offset", Int),
            ("length", Int),
        ],
        true,
    ),
    m("job.purge", &[("job_id", Str)], false),
    m("file.ls", &[("path", Str), ("pattern", Str)], false),
    m(
        "file.read",
        &[("path", Str), ("offset", Int), ("length", Int)],
        true,
    ),
    m("file.md5", &[("path", Str)], false),
    m("file.grep", &[("path", Str), ("pattern", Str)], false),
];

pub fn lookup(name: &str) -> Option<&'static MethodSpec> {
    METHODS.iter().find(|m| m.name == name)
}

/// True when `scope` names a known service (`job`) or method (`job.kill`).
pub fn is_valid_scope(scope: &str) -> bool {
    METHODS
        .iter()
        .any(|m| m.name == scope || m.service() == scope)
}

/// Distinct service names, in table order.
pub fn services() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    for m in METHODS {
        if !out.contains(&m.service()) {
            out.push(m.service());
        }
    }
    out
}
