#![allow(dead_code)]

use std::future::Future;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use gridlet_client::{Auth, RpcClient};
use gridlet_core::acl::SharedSecretCredential;
use gridlet_core::worker::JobRequest;
use gridlet_server::{Config, RunningNode};

pub const SECRET: &str = "stack-secret";

pub fn credential(dn: &str, vos: &[&str]) -> Vec<u8> {
    SharedSecretCredential {
        dn: dn.into(),
        vos: vos.iter().map(|v| v.to_string()).collect(),
        secret: SECRET.into(),
    }
    .to_bytes()
}

pub fn admin_credential() -> Vec<u8> {
    credential("/O=gridlet/CN=operator", &["admin"])
}

pub fn admin(url: &str) -> RpcClient {
    RpcClient::new(url).with_auth(Auth::Credential(admin_credential()))
}

pub struct NodeSpec<'a> {
    pub peer_id: &'a str,
    /// None: start as leader.
    pub leader_url: Option<&'a str>,
    pub worker: bool,
    pub interval_s: f64,
    pub listen: String,
}

impl<'a> NodeSpec<'a> {
    pub fn leader(peer_id: &'a str, interval_s: f64) -> Self {
        NodeSpec {
            peer_id,
            leader_url: None,
            worker: false,
            interval_s,
            listen: "127.0.0.1:0".into(),
        }
    }

    pub fn worker(peer_id: &'a str, leader_url: &'a str, interval_s: f64) -> Self {
        NodeSpec {
            peer_id,
            leader_url: Some(leader_url),
            worker: true,
            interval_s,
            listen: "127.0.0.1:0".into(),
        }
    }
}

pub fn config(spec: &NodeSpec<'_>, data_dir: &Path) -> Config {
    let broker = match spec.leader_url {
        None => "leader = true".to_string(),
        Some(url) => format!("url = \"{url}\""),
    };
    let text = format!(
        r#"
[node]
listen = "{listen}"
data_dir = "{data}"
secret = "{SECRET}"
worker = {worker}
slots = 1
metrics = "slots"

[broker]
peer_id = "{peer}"
{broker}
probe_timeout_s = 0.5

[monitor]
interval_s = {interval}
"#,
        listen = spec.listen,
        data = data_dir.display(),
        worker = spec.worker,
        peer = spec.peer_id,
        interval = spec.interval_s,
    );
    Config::from_toml(&text).unwrap()
}

pub async fn start(spec: &NodeSpec<'_>, data_dir: &Path) -> RunningNode {
    RunningNode::start(config(spec, data_dir)).await.unwrap()
}

/// A leader without a worker plus `n` workers named w1..wn.
pub struct Stack {
    pub dir: tempfile::TempDir,
    pub broker: Option<RunningNode>,
    pub workers: Vec<Option<RunningNode>>,
    pub broker_url: String,
}

impl Stack {
    pub async fn start(n: usize, interval_s: f64) -> Stack {
        let dir = tempfile::tempdir().unwrap();
        let broker = start(&NodeSpec::leader("b0", interval_s), &dir.path().join("b0")).await;
        let broker_url = broker.url().to_owned();
        let mut workers = Vec::new();
        for i in 1..=n {
            let id = format!("w{i}");
            let w = start(
                &NodeSpec::worker(&id, &broker_url, interval_s),
                &dir.path().join(&id),
            )
            .await;
            workers.push(Some(w));
        }
        let stack = Stack {
            dir,
            broker: Some(broker),
            workers,
            broker_url,
        };
        stack.wait_fresh(n).await;
        stack
    }

    pub fn broker_node(&self) -> &RunningNode {
        self.broker.as_ref().unwrap()
    }

    pub fn worker(&self, i: usize) -> &RunningNode {
        self.workers[i].as_ref().unwrap()
    }

    pub fn data_dir(&self, peer_id: &str) -> PathBuf {
        self.dir.path().join(peer_id)
    }

    pub fn publish_dir(&self, peer_id: &str) -> PathBuf {
        self.data_dir(peer_id).join("pub")
    }

    pub fn client(&self) -> RpcClient {
        admin(&self.broker_url)
    }

    /// Waits until the broker holds fresh reports from `n` peers.
    pub async fn wait_fresh(&self, n: usize) {
        let node = self.broker_node().node().clone();
        let window = node.config().freshness_window_s();
        let ok = wait_for(Duration::from_secs(15), || {
            let node = node.clone();
            async move {
                let now = gridlet_core::monitor::now_epoch_secs();
                node.broker_state()
                    .peers()
                    .filter(|p| p.is_fresh(now, window))
                    .count()
                    >= n
            }
        })
        .await;
        assert!(ok, "{n} workers never reported");
    }
}

/// Polls `cond` every 50 ms until it holds or `timeout` passes.
pub async fn wait_for<F, Fut>(timeout: Duration, mut cond: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: Future<Output = bool>,
{
    let deadline = Instant::now() + timeout;
    loop {
        if cond().await {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

pub fn script_request(name: &str, script: &str, submit: &str, inputs: &[&str]) -> JobRequest {
    JobRequest {
        job_name: name.into(),
        executable: script.as_bytes().to_vec(),
        submit_file: submit.as_bytes().to_vec(),
        submit_file_name: "job.sub".into(),
        input_file_names: inputs.iter().map(|s| s.to_string()).collect(),
    }
}

pub async fn wait_aggregate(
    client: &RpcClient,
    job_id: &str,
    state: &str,
    timeout: Duration,
) -> bool {
    wait_for(timeout, || async {
        client
            .job_status(job_id)
            .await
            .is_ok_and(|s| s.aggregate.as_str() == state)
    })
    .await
}
