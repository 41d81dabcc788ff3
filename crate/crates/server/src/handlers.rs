//! Method dispatch: parameter checks, authorization, then the handler.

use std::sync::Arc;

use gridlet_client::transfer::{self, Journal};
use gridlet_client::RoleInfo;
use gridlet_core::acl::{Decision, Effect, Identity, PrincipalKind};
use gridlet_core::broker::{BrokerSnapshot, JobIndexEntry, Leadership, Role};
use gridlet_core::methods;
use gridlet_core::monitor::{now_epoch_secs, LoadReport};
use gridlet_core::rpc::{fault_code as fc, Fault, Hop, Outcome, RpcCall, RpcValue};
use gridlet_core::worker::{input_base_name, JobRequest, Worker, WorkerError};

use crate::faults;
use crate::node::Node;

type Handled = Result<Outcome, Fault>;

fn ok(v: impl Into<RpcValue>) -> Handled {
    Ok(Outcome::Success(v.into()))
}

fn str_param(params: &[RpcValue], i: usize) -> &str {
    // shapes were checked against the method table
    params[i].as_str().unwrap_or_default()
}

fn int_param(params: &[RpcValue], i: usize) -> i32 {
    params[i].as_i32().unwrap_or_default()
}

/// Handles one call. `identity` is the authenticated caller, if any;
/// `hop` says how a relayed call reached this node.
pub async fn dispatch(node: &Arc<Node>, call: RpcCall, hop: Option<Hop>) -> Outcome {
    match dispatch_inner(node, call, hop).await {
        Ok(o) => o,
        Err(f) => Outcome::Fault(f),
    }
}

async fn dispatch_inner(node: &Arc<Node>, call: RpcCall, hop: Option<Hop>) -> Handled {
    let spec = methods::lookup(&call.method).ok_or_else(|| {
        Fault::new(
            fc::UNKNOWN_METHOD,
            format!("unknown method {}", call.method),
        )
    })?;
    spec.check_params(&call.params)
        .map_err(|m| Fault::new(fc::BAD_PARAMS, m))?;
    let params = &call.params;
    if spec.name == "auth.login" {
        return login(node, params[0].as_bytes().unwrap_or_default());
    }
    let identity = call.identity.as_ref().ok_or_else(|| {
        Fault::new(
            fc::ACCESS_DENIED,
            format!("{}: no credential presented", spec.name),
        )
    })?;
    if node.acl.authorize(identity, spec.name) == Decision::Deny {
        return Err(Fault::new(
            fc::ACCESS_DENIED,
            format!("{} denied for {}", spec.name, identity.dn),
        ));
    }
    tracing::debug!("{}: {} from {}", node.peer_id, spec.name, identity.dn);

    match spec.name {
        "acl.add" => acl_add(node, identity, params),
        "acl.remove" => {
            let id = u32::try_from(int_param(params, 0))
                .map_err(|_| Fault::new(fc::NOT_FOUND, "no such entry"))?;
            node.acl.remove(identity, id).map_err(faults::acl)?;
            ok(true)
        }
        "acl.list" => ok(RpcValue::Array(
            node.acl
                .list()
                .into_iter()
                .map(|s| {
                    RpcValue::record([
                        ("id", RpcValue::Int(s.id as i32)),
                        ("kind", RpcValue::from(s.entry.kind.to_string())),
                        ("effect", RpcValue::from(s.entry.effect.to_string())),
                        ("principal", RpcValue::from(s.entry.principal)),
                        ("scope", RpcValue::from(s.entry.scope)),
                    ])
                })
                .collect(),
        )),
        "monitor.report" => monitor_report(node, params, hop).await,
        "peer.register" => peer_register(node, params, hop).await,
        "peer.list" => {
            let b = node.broker.lock();
            ok(RpcValue::Array(b.peers().map(|p| p.to_rpc()).collect()))
        }
        "broker.announce" => announce(node, params),
        "broker.role" => ok(role_info(node).to_rpc()),
        "broker.sync" => sync(node, &params[0]),
        "job.submit" => submit(node, identity, params, hop).await,
        "job.accept" => {
            let request = JobRequest::from_rpc(&params[1]).map_err(faults::params)?;
            accept(node, str_param(params, 0), request, str_param(params, 2)).await
        }
        "job.status" | "job.kill" | "job.outputs" | "job.fetch" | "job.purge" => {
            job_call(node, spec.name, params, hop).await
        }
        "file.ls" => {
            let entries = node
                .files
                .ls(str_param(params, 0), str_param(params, 1))
                .map_err(faults::worker)?;
            ok(RpcValue::Array(
                entries.iter().map(|e| e.to_rpc()).collect(),
            ))
        }
        "file.read" => {
            let (off, len) = (int_param(params, 1).into(), int_param(params, 2).into());
            Ok(Outcome::Binary(
                node.files
                    .read(str_param(params, 0), off, len)
                    .map_err(faults::worker)?,
            ))
        }
        "file.md5" => ok(node
            .files
            .md5(str_param(params, 0))
            .map_err(faults::worker)?),
        "file.grep" => {
            let found = node
                .files
                .grep(str_param(params, 0), str_param(params, 1))
                .map_err(faults::worker)?;
            ok(RpcValue::Array(found.iter().map(|m| m.to_rpc()).collect()))
        }
        other => Err(Fault::new(fc::INTERNAL, format!("{other} has no handler"))),
    }
}

fn login(node: &Node, credential: &[u8]) -> Handled {
    use gridlet_core::acl::CredentialVerifier;
    let identity = node.verifier.verify(credential).map_err(faults::auth)?;
    let token = uuid::Uuid::new_v4().simple().to_string();
    node.sessions.lock().insert(token.clone(), identity);
    ok(token)
}

fn acl_add(node: &Node, identity: &Identity, params: &[RpcValue]) -> Handled {
    let kind: PrincipalKind = str_param(params, 0).parse().map_err(faults::acl)?;
    let effect: Effect = str_param(params, 1).parse().map_err(faults::acl)?;
    let entry =
        gridlet_core::acl::AclEntry::new(kind, effect, str_param(params, 2), str_param(params, 3));
    let id = node.acl.add(identity, entry).map_err(faults::acl)?;
    ok(RpcValue::Int(id as i32))
}

pub(crate) fn role_info(node: &Node) -> RoleInfo {
    let b = node.broker.lock();
    RoleInfo {
        peer_id: node.peer_id.clone(),
        role: b.role.as_str().into(),
        leadership: b.leadership.clone(),
    }
}

/// Where a broker-side call should go when this node does not lead.
enum Leader {
    Me,
    Elsewhere(String),
}

fn leader(node: &Node) -> Leader {
    let b = node.broker.lock();
    match b.role {
        Role::Leader => Leader::Me,
        Role::Standby => Leader::Elsewhere(b.leadership.leader_url.clone()),
    }
}

/// Relays a broker call from a standby to the leader. A call that was
/// itself proxied is never relayed again.
async fn proxy_to_leader(
    node: &Node,
    method: &str,
    params: &[RpcValue],
    hop: Option<Hop>,
    url: &str,
) -> Handled {
    if hop.is_some() || url.is_empty() || url == node.url {
        return Err(Fault::new(
            fc::FORWARD_FAILED,
            format!("{} is not the leading broker", node.peer_id),
        ));
    }
    let client = node.relay_client(url, Hop::Proxy);
    let v = client.call(method, params.to_vec()).await.map_err(|e| {
        faults::relayed(e, fc::FORWARD_FAILED, &format!("leader {url} unreachable"))
    })?;
    ok(v)
}

async fn monitor_report(node: &Arc<Node>, params: &[RpcValue], hop: Option<Hop>) -> Handled {
    if let Leader::Elsewhere(url) = leader(node) {
        return proxy_to_leader(node, "monitor.report", params, hop, &url).await;
    }
    let report = LoadReport::from_params(params).map_err(faults::params)?;
    node.broker.lock().ingest(&report).map_err(faults::broker)?;
    ok(true)
}

async fn peer_register(node: &Arc<Node>, params: &[RpcValue], hop: Option<Hop>) -> Handled {
    if let Leader::Elsewhere(url) = leader(node) {
        return proxy_to_leader(node, "peer.register", params, hop, &url).await;
    }
    let (peer_id, url) = (str_param(params, 0), str_param(params, 1));
    if !gridlet_core::worker::is_plain_name(peer_id) || url.is_empty() {
        return Err(Fault::new(
            fc::BAD_PARAMS,
            "peer.register needs a plain peer id and a URL",
        ));
    }
    let registry = {
        let mut b = node.broker.lock();
        let registry = b.register(peer_id, url, now_epoch_secs());
        node.save_broker(&b);
        registry
    };
    tracing::info!("{}: registered {peer_id} at {url}", node.peer_id);
    let n = node.clone();
    tokio::spawn(async move { crate::agent::replicate(&n).await });
    ok(RpcValue::Array(
        registry.iter().map(|p| p.to_rpc()).collect(),
    ))
}

fn announce(node: &Node, params: &[RpcValue]) -> Handled {
    let epoch = u32::try_from(int_param(params, 1))
        .map_err(|_| Fault::new(fc::BAD_PARAMS, "negative epoch"))?;
    let offered = Leadership {
        epoch,
        leader_url: str_param(params, 0).to_owned(),
        leader_id: str_param(params, 2).to_owned(),
    };
    if node.observe_leadership(offered) {
        // the new leader should hear from us without waiting a full tick
        node.report_now.notify_one();
    }
    ok(role_info(node).to_rpc())
}

fn sync(node: &Node, snapshot: &RpcValue) -> Handled {
    let snap = BrokerSnapshot::from_rpc(snapshot).map_err(faults::params)?;
    node.observe_leadership(snap.leadership.clone());
    let mut b = node.broker.lock();
    b.apply_snapshot(snap).map_err(faults::broker)?;
    b.role = if b.leadership.leader_id == node.peer_id {
        Role::Leader
    } else {
        Role::Standby
    };
    node.save_broker(&b);
    ok(true)
}

fn request_from_params(params: &[RpcValue]) -> JobRequest {
    JobRequest {
        job_name: str_param(params, 0).to_owned(),
        executable: params[1].as_bytes().unwrap_or_default().to_vec(),
        submit_file: params[2].as_bytes().unwrap_or_default().to_vec(),
        submit_file_name: str_param(params, 3).to_owned(),
        input_file_names: params[4].string_list().unwrap_or_default(),
    }
}

async fn submit(
    node: &Arc<Node>,
    identity: &Identity,
    params: &[RpcValue],
    hop: Option<Hop>,
) -> Handled {
    if let Leader::Elsewhere(url) = leader(node) {
        return proxy_to_leader(node, "job.submit", params, hop, &url).await;
    }
    let request = request_from_params(params);
    request.validate().map_err(faults::worker)?;
    // inputs are served from this node's publishing area; check them before
    // bothering a worker
    for name in &request.input_file_names {
        let path = node.files.resolve(name).map_err(faults::worker)?;
        if !path.is_file() {
            return Err(Fault::new(
                fc::NOT_FOUND,
                format!("input {name} is not a regular file"),
            ));
        }
    }

    let (target, job_id) = {
        let mut b = node.broker.lock();
        let target = b
            .select_target(now_epoch_secs(), node.config.freshness_window_s())
            .map_err(faults::broker)?
            .clone();
        let job_id = b.allocate_job_id(&target.peer_id);
        (target, job_id)
    };
    tracing::info!(
        "{}: {job_id} goes to {} ({})",
        node.peer_id,
        target.peer_id,
        target.url
    );

    if target.url == node.url {
        accept(node, &job_id, request, &node.url).await?;
    } else {
        let client = node.relay_client(&target.url, Hop::Route);
        let params = vec![
            RpcValue::from(job_id.as_str()),
            request.to_rpc(),
            RpcValue::from(node.url.as_str()),
        ];
        client.call("job.accept", params).await.map_err(|e| {
            faults::relayed(
                e,
                fc::FORWARD_FAILED,
                &format!("forwarding {job_id} to {}", target.peer_id),
            )
        })?;
    }

    {
        let mut b = node.broker.lock();
        b.insert_job(JobIndexEntry {
            job_id: job_id.clone(),
            owner_peer: target.peer_id.clone(),
            submitted_at: now_epoch_secs(),
            client_dn: identity.dn.clone(),
        });
        node.save_broker(&b);
    }
    crate::agent::replicate(node).await;
    ok(job_id)
}

/// Worker side of a submission: stage, fetch inputs, start the runs.
async fn accept(node: &Arc<Node>, job_id: &str, request: JobRequest, forwarder: &str) -> Handled {
    let worker = node.worker.as_ref().ok_or_else(|| {
        Fault::new(
            fc::NOT_A_WORKER,
            format!("{} does not run jobs", node.peer_id),
        )
    })?;
    let reservation = worker.reserve(job_id).map_err(faults::worker)?;
    let job = worker.prepare(request).map_err(faults::worker)?;
    let incoming = node.incoming_dir.join(job_id);
    let inputs = if forwarder == node.url {
        worker.local_inputs(&job.request)
    } else {
        fetch_inputs(node, &incoming, &job.request, forwarder).await
    };
    let result = inputs.and_then(|inputs| worker.accept(reservation, &job, &inputs));
    let _ = std::fs::remove_dir_all(&incoming);
    let clusters = result.map_err(faults::worker)?;
    tracing::info!(
        "{}: accepted {job_id} with {} run(s)",
        node.peer_id,
        clusters.len()
    );
    crate::agent::report_once(node).await;
    ok(RpcValue::record([
        ("job_id", RpcValue::from(job_id)),
        (
            "clusters",
            RpcValue::Array(
                clusters
                    .iter()
                    .map(|c| RpcValue::from(c.to_string()))
                    .collect(),
            ),
        ),
    ]))
}

/// Downloads each input from the forwarding node's publishing area.
async fn fetch_inputs(
    node: &Node,
    dir: &std::path::Path,
    request: &JobRequest,
    forwarder: &str,
) -> Result<Vec<std::path::PathBuf>, WorkerError> {
    let fail = |e: &dyn std::fmt::Display| WorkerError::InputFetch(e.to_string());
    std::fs::create_dir_all(dir).map_err(|e| fail(&e))?;
    let mut journal = Journal::load(dir.join("journal")).map_err(|e| fail(&e))?;
    let client = node.client(forwarder, std::time::Duration::from_secs(60));
    let mut paths = Vec::new();
    for (i, name) in request.input_file_names.iter().enumerate() {
        let local = dir.join(format!("{i}-{}", input_base_name(name)));
        transfer::download(
            &client,
            &mut journal,
            name,
            &local,
            transfer::DEFAULT_CHUNK_BYTES * 16,
        )
        .await
        .map_err(|e| WorkerError::InputFetch(format!("{name}: {e}")))?;
        paths.push(local);
    }
    Ok(paths)
}

fn serve_job(worker: &Worker, method: &str, params: &[RpcValue]) -> Handled {
    let job_id = str_param(params, 0);
    let w = faults::worker;
    match method {
        "job.status" => ok(worker.status(job_id).map_err(w)?.to_rpc()),
        "job.kill" => {
            worker.kill(job_id).map_err(w)?;
            ok(true)
        }
        "job.purge" => {
            worker.purge(job_id).map_err(w)?;
            ok(true)
        }
        "job.outputs" => {
            let runs = worker.outputs(job_id).map_err(w)?;
            ok(RpcValue::Array(
                runs.iter()
                    .map(|r| RpcValue::Array(r.iter().map(|o| o.to_rpc()).collect()))
                    .collect(),
            ))
        }
        "job.fetch" => {
            let bytes = worker
                .fetch(
                    job_id,
                    int_param(params, 1),
                    str_param(params, 2),
                    int_param(params, 3).into(),
                    int_param(params, 4).into(),
                )
                .map_err(w)?;
            Ok(Outcome::Binary(bytes))
        }
        other => Err(Fault::new(
            fc::INTERNAL,
            format!("{other} is not a job call"),
        )),
    }
}

/// Serves a job call locally when this node owns the job, otherwise routes
/// it to the owner found in the index.
async fn job_call(
    node: &Arc<Node>,
    method: &str,
    params: &[RpcValue],
    hop: Option<Hop>,
) -> Handled {
    let job_id = str_param(params, 0);
    if let Some(worker) = node.worker.as_ref().filter(|w| w.has_job(job_id)) {
        return serve_job(worker, method, params);
    }
    if hop == Some(Hop::Route) {
        return Err(Fault::new(fc::UNKNOWN_JOB, format!("unknown job {job_id}")));
    }
    let (owner, leader_url) = {
        let b = node.broker.lock();
        let owner = b.job(job_id).ok().map(|e| {
            let url = b.peer(&e.owner_peer).map(|p| p.url.clone());
            (e.owner_peer.clone(), url)
        });
        let leader_url = (b.role == Role::Standby).then(|| b.leadership.leader_url.clone());
        (owner, leader_url)
    };
    match (owner, leader_url) {
        (Some((peer, Some(url))), _) if url != node.url => {
            let client = node.relay_client(&url, Hop::Route);
            let unreachable = |e| {
                faults::relayed(
                    e,
                    fc::OWNER_UNREACHABLE,
                    &format!("owner {peer} unreachable"),
                )
            };
            if method == "job.fetch" {
                Ok(Outcome::Binary(
                    client
                        .call_binary(method, params.to_vec())
                        .await
                        .map_err(unreachable)?,
                ))
            } else {
                ok(client
                    .call(method, params.to_vec())
                    .await
                    .map_err(unreachable)?)
            }
        }
        (Some((peer, None)), _) => Err(Fault::new(
            fc::OWNER_UNREACHABLE,
            format!("owner {peer} of {job_id} is not registered"),
        )),
        // a standby that has not seen the entry yet asks the leader
        (None, Some(url)) if hop.is_none() && !url.is_empty() => {
            let client = node.relay_client(&url, Hop::Proxy);
            let failed =
                |e| faults::relayed(e, fc::FORWARD_FAILED, &format!("leader {url} unreachable"));
            if method == "job.fetch" {
                Ok(Outcome::Binary(
                    client
                        .call_binary(method, params.to_vec())
                        .await
                        .map_err(failed)?,
                ))
            } else {
                ok(client.call(method, params.to_vec()).await.map_err(failed)?)
            }
        }
        _ => Err(Fault::new(fc::UNKNOWN_JOB, format!("unknown job {job_id}"))),
    }
}

/// Resolves the caller from a base64 credential header or a session token.
pub fn authenticate(
    node: &Node,
    credential: Option<&str>,
    session: Option<&str>,
) -> Result<Option<Identity>, Fault> {
    use base64::Engine;
    use gridlet_core::acl::CredentialVerifier;
    if let Some(c) = credential {
        let raw = base64::engine::general_purpose::STANDARD
            .decode(c.trim())
            .map_err(|e| {
                Fault::new(
                    fc::INVALID_CREDENTIAL,
                    format!("credential header is not base64: {e}"),
                )
            })?;
        return node.verifier.verify(&raw).map(Some).map_err(faults::auth);
    }
    if let Some(s) = session {
        return node
            .sessions
            .lock()
            .get(s.trim())
            .cloned()
            .map(Some)
            .ok_or_else(|| Fault::new(fc::INVALID_CREDENTIAL, "unknown or expired session"));
    }
    Ok(None)
}
