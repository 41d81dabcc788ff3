//! Background duties: load reporting, registration, failure detection and
//! election, and (while leading) replication to the other peers.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use tokio::task::JoinSet;
use tokio::time::MissedTickBehavior;

use gridlet_client::{ClientError, RoleInfo};
use gridlet_core::broker::{BrokerError, Leadership, Role};
use gridlet_core::monitor::{now_epoch_secs, LoadReport};
use gridlet_core::rpc::{fault_code as fc, RpcValue};

use crate::node::Node;

/// Starts the periodic tasks for `node`.
pub fn spawn(node: &Arc<Node>) -> Vec<tokio::task::JoinHandle<()>> {
    let mut tasks = vec![tokio::spawn(sync_loop(node.clone()))];
    if node.worker.is_some() {
        tasks.push(tokio::spawn(publish_loop(node.clone())));
    }
    tasks
}

/// Reports every interval, or sooner when poked. Repeated delivery failures
/// trigger a leader probe and, if that fails too, an election.
async fn publish_loop(node: Arc<Node>) {
    let mut ticker = tokio::time::interval(node.config.interval());
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = ticker.tick() => {}
            _ = node.report_now.notified() => {}
        }
        let delivered = if node.registered.load(Ordering::SeqCst) {
            report_once(&node).await
        } else {
            register(&node).await && report_once(&node).await
        };
        if delivered {
            node.failures.store(0, Ordering::SeqCst);
            continue;
        }
        let failures = node.failures.fetch_add(1, Ordering::SeqCst) + 1;
        tracing::debug!(
            "{}: report delivery failed ({failures} in a row)",
            node.peer_id
        );
        if failures >= node.config.broker.failover_k {
            check_leader(&node).await;
        }
    }
}

/// Samples and reports once. Returns false only when the leader could not
/// be reached; a fault still proves it alive.
pub(crate) async fn report_once(node: &Arc<Node>) -> bool {
    if node.worker.is_none() {
        return true;
    }
    let sample = match node.sample() {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!("{}: sampling failed: {e}", node.peer_id);
            return true;
        }
    };
    let report = LoadReport::new(node.url.as_str(), sample, &node.weights, now_epoch_secs());
    let leader_url = {
        let mut b = node.broker.lock();
        if b.role == Role::Leader {
            if let Err(BrokerError::UnknownPeer(_)) = b.ingest(&report) {
                b.register(&node.peer_id, &node.url, now_epoch_secs());
                node.save_broker(&b);
                let _ = b.ingest(&report);
            }
            return true;
        }
        b.leadership.leader_url.clone()
    };
    match node
        .probe_client(&leader_url)
        .call("monitor.report", report.to_params())
        .await
    {
        Ok(_) => true,
        Err(ClientError::Fault(f)) => {
            if f.code == fc::UNKNOWN_PEER {
                node.registered.store(false, Ordering::SeqCst);
            }
            tracing::debug!("{}: report refused: {f}", node.peer_id);
            true
        }
        Err(e) => {
            tracing::debug!("{}: report to {leader_url} failed: {e}", node.peer_id);
            false
        }
    }
}

/// Learns who leads from the configured broker, then registers there.
async fn register(node: &Arc<Node>) -> bool {
    let leader_url = node.leadership().leader_url;
    if node.role() == Role::Leader {
        let mut b = node.broker.lock();
        b.register(&node.peer_id, &node.url, now_epoch_secs());
        node.save_broker(&b);
        node.registered.store(true, Ordering::SeqCst);
        return true;
    }
    match probe_role(node, &leader_url).await {
        Ok(Some(info)) => {
            node.observe_leadership(info.leadership);
        }
        Ok(None) => {}
        Err(e) => {
            tracing::debug!("{}: broker {leader_url} unreachable: {e}", node.peer_id);
            return false;
        }
    }
    // the probed node may have named a newer leader
    let leader_url = node.leadership().leader_url;
    let client = node.probe_client(&leader_url);
    match client.peer_register(&node.peer_id, &node.url).await {
        Ok(registry) => {
            tracing::info!(
                "{}: registered with {leader_url} ({} peers)",
                node.peer_id,
                registry.len()
            );
            node.registered.store(true, Ordering::SeqCst);
            true
        }
        Err(ClientError::Fault(f)) => {
            tracing::warn!("{}: registration refused: {f}", node.peer_id);
            true
        }
        Err(_) => false,
    }
}

async fn probe(node: &Node, url: &str) -> Option<RoleInfo> {
    node.probe_client(url).broker_role().await.ok()
}

/// Like [`probe`], but a fault still counts as reachable.
async fn probe_role(node: &Node, url: &str) -> Result<Option<RoleInfo>, ClientError> {
    match node.probe_client(url).broker_role().await {
        Ok(info) => Ok(Some(info)),
        Err(ClientError::Fault(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Probes the leader after repeated failures; elects a new one if the
/// probe fails. The smallest live peer id in the replicated registry wins.
async fn check_leader(node: &Arc<Node>) {
    let current = node.leadership();
    if node.role() == Role::Leader {
        return;
    }
    if let Some(info) = probe(node, &current.leader_url).await {
        tracing::info!(
            "{}: leader {} answers a probe; keeping it",
            node.peer_id,
            current.leader_id
        );
        node.observe_leadership(info.leadership);
        node.failures.store(0, Ordering::SeqCst);
        return;
    }
    let mut candidates: Vec<(String, String)> = {
        let b = node.broker.lock();
        b.peers()
            .filter(|p| p.peer_id != current.leader_id && p.url != current.leader_url)
            .map(|p| (p.peer_id.clone(), p.url.clone()))
            .collect()
    };
    if !candidates.iter().any(|(id, _)| *id == node.peer_id) {
        candidates.push((node.peer_id.clone(), node.url.clone()));
    }
    candidates.sort();
    for (peer_id, url) in candidates {
        if peer_id == node.peer_id {
            promote(node, &current).await;
            return;
        }
        if let Some(info) = probe(node, &url).await {
            // a smaller peer is alive; it either leads already or will shortly
            tracing::info!("{}: deferring to live peer {peer_id}", node.peer_id);
            if info.leadership.supersedes(&current) {
                node.observe_leadership(info.leadership);
            }
            node.failures.store(0, Ordering::SeqCst);
            return;
        }
    }
}

async fn promote(node: &Arc<Node>, previous: &Leadership) {
    let leadership = {
        let mut b = node.broker.lock();
        if b.leadership != *previous {
            // someone announced meanwhile
            return;
        }
        let l = b.promote(&node.peer_id, &node.url);
        node.save_broker(&b);
        l
    };
    tracing::warn!(
        "{}: leader {} is gone; taking over with epoch {}",
        node.peer_id,
        previous.leader_id,
        leadership.epoch
    );
    if !previous.leader_url.is_empty() {
        node.displaced.lock().insert(previous.leader_url.clone());
    }
    node.synced.lock().clear();
    node.failures.store(0, Ordering::SeqCst);
    node.registered.store(true, Ordering::SeqCst);
    node.report_now.notify_one();
    let targets: Vec<String> = {
        let b = node.broker.lock();
        b.peers()
            .map(|p| p.url.clone())
            .filter(|u| *u != node.url)
            .collect()
    };
    announce(node, &leadership, targets).await;
    replicate(node).await;
}

/// Sends `broker.announce` to each URL. Returns the URLs that accepted.
async fn announce(node: &Arc<Node>, leadership: &Leadership, urls: Vec<String>) -> Vec<String> {
    let mut set = JoinSet::new();
    for url in urls {
        let client = node.probe_client(&url);
        let params = vec![
            RpcValue::from(leadership.leader_url.as_str()),
            RpcValue::Int(leadership.epoch as i32),
            RpcValue::from(leadership.leader_id.as_str()),
        ];
        set.spawn(async move {
            let reply = client.call("broker.announce", params).await;
            (url, reply.ok().and_then(|v| RoleInfo::from_rpc(&v).ok()))
        });
    }
    let mut accepted = Vec::new();
    while let Some(Ok((url, info))) = set.join_next().await {
        let Some(info) = info else { continue };
        if info.leadership == *leadership {
            accepted.push(url);
        } else if info.leadership.supersedes(leadership) {
            node.observe_leadership(info.leadership);
        }
    }
    accepted
}

/// While leading, pushes the registry and index to every peer that has not
/// acknowledged the current version.
pub(crate) async fn replicate(node: &Arc<Node>) {
    let (snapshot, version, targets) = {
        let b = node.broker.lock();
        if b.role != Role::Leader {
            return;
        }
        let synced = node.synced.lock();
        let targets: Vec<String> = b
            .peers()
            .map(|p| p.url.clone())
            .filter(|u| *u != node.url && synced.get(u).is_none_or(|v| *v < b.version()))
            .collect();
        (b.snapshot().to_rpc(), b.version(), targets)
    };
    let mut set = JoinSet::new();
    for url in targets {
        let client = node.probe_client(&url);
        let snapshot = snapshot.clone();
        set.spawn(async move { (url, client.call("broker.sync", vec![snapshot]).await) });
    }
    while let Some(Ok((url, result))) = set.join_next().await {
        match result {
            Ok(_) => {
                let mut synced = node.synced.lock();
                let v = synced.entry(url).or_default();
                *v = (*v).max(version);
            }
            Err(ClientError::Fault(f)) if f.code == fc::STALE_EPOCH => {
                // the peer follows a newer leader
                if let Some(info) = probe(node, &url).await {
                    node.observe_leadership(info.leadership);
                }
            }
            Err(e) => tracing::debug!("{}: sync to {url} failed: {e}", node.peer_id),
        }
    }
}

/// Each interval while leading: catch up lagging peers and keep telling
/// displaced brokers who leads now.
async fn sync_loop(node: Arc<Node>) {
    let mut ticker = tokio::time::interval(node.config.interval());
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        if node.role() != Role::Leader {
            continue;
        }
        replicate(&node).await;
        let displaced: Vec<String> = node.displaced.lock().iter().cloned().collect();
        if displaced.is_empty() {
            continue;
        }
        let leadership = node.leadership();
        for url in announce(&node, &leadership, displaced).await {
            tracing::info!("{}: former broker {url} now follows", node.peer_id);
            node.displaced.lock().remove(&url);
        }
    }
}
