//! HTTP surface: `POST /rpc`, the `/api/` JSON mirror and optional `/ui/`.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use gridlet_core::methods;
use gridlet_core::rpc::{
    decode_call, fault_code as fc, respond, wants_binary, Fault, Hop, Outcome, RpcCall, RpcError,
    BINARY_CONTENT_TYPE, BINARY_REQUEST_HEADER, CREDENTIAL_HEADER, FORWARDED_HEADER, RPC_PATH,
    SESSION_HEADER,
};

use crate::handlers::{authenticate, dispatch};
use crate::json;
use crate::node::Node;

pub fn router(node: Arc<Node>) -> Router {
    let mut app = Router::new()
        .route(RPC_PATH, post(rpc))
        .route("/api/{method}", get(api).post(api));
    if let Some(dir) = node.config.node.ui_dir.clone() {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app.with_state(node)
}

fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

fn caller(node: &Node, headers: &HeaderMap) -> Result<Option<gridlet_core::acl::Identity>, Fault> {
    authenticate(
        node,
        header(headers, CREDENTIAL_HEADER),
        header(headers, SESSION_HEADER),
    )
}

async fn rpc(State(node): State<Arc<Node>>, headers: HeaderMap, body: Bytes) -> Response {
    let binary = wants_binary(header(&headers, BINARY_REQUEST_HEADER));
    let hop = header(&headers, FORWARDED_HEADER).and_then(Hop::parse);
    let (outcome, capable) = match decode_call(&body) {
        Ok(mut call) => {
            let capable = methods::lookup(&call.method).is_some_and(|m| m.binary);
            match caller(&node, &headers) {
                Ok(identity) => {
                    call.identity = identity;
                    (dispatch(&node, call, hop).await, capable)
                }
                Err(f) => (Outcome::Fault(f), capable),
            }
        }
        Err(RpcError::InvalidMethod(m)) => (
            Outcome::Fault(Fault::new(
                fc::UNKNOWN_METHOD,
                format!("invalid method name `{m}`"),
            )),
            false,
        ),
        Err(e) => (
            Outcome::Fault(Fault::new(fc::MALFORMED_REQUEST, e.to_string())),
            false,
        ),
    };
    let reply = respond(outcome, binary, capable);
    let mut resp = (
        StatusCode::from_u16(reply.status).unwrap_or(StatusCode::OK),
        [(header::CONTENT_TYPE, reply.content_type)],
        reply.body,
    )
        .into_response();
    for (k, v) in reply.headers {
        resp.headers_mut()
            .insert(k, v.parse().expect("static header value"));
    }
    resp
}

fn fault_response(f: &Fault) -> Response {
    let status =
        StatusCode::from_u16(json::fault_status(f.code)).unwrap_or(StatusCode::BAD_REQUEST);
    (status, Json(json::fault_json(f))).into_response()
}

async fn api(
    State(node): State<Arc<Node>>,
    Path(method): Path<String>,
    http_method: Method,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let Some(spec) = methods::lookup(&method) else {
        return fault_response(&Fault::new(
            fc::UNKNOWN_METHOD,
            format!("unknown method {method}"),
        ));
    };
    let args = if http_method == Method::GET || body.is_empty() {
        json::query_to_json(query)
    } else {
        match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(e) => {
                return fault_response(&Fault::new(
                    fc::MALFORMED_REQUEST,
                    format!("invalid JSON: {e}"),
                ))
            }
        }
    };
    let params = match json::params_from_json(spec, &args) {
        Ok(p) => p,
        Err(f) => return fault_response(&f),
    };
    let identity = match caller(&node, &headers) {
        Ok(i) => i,
        Err(f) => return fault_response(&f),
    };
    let mut call = RpcCall::new(spec.name, params);
    call.identity = identity;
    match dispatch(&node, call, None).await {
        Outcome::Success(v) => Json(json::to_json(&v)).into_response(),
        Outcome::Binary(bytes) => {
            ([(header::CONTENT_TYPE, BINARY_CONTENT_TYPE)], bytes).into_response()
        }
        Outcome::Fault(f) => fault_response(&f),
    }
}
