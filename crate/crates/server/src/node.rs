//! One gridlet node: file service, optional worker, embedded broker.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::sync::Notify;

use gridlet_client::{Auth, RpcClient};
use gridlet_core::acl::{
    AclEntry, AclStore, Identity, SharedSecretCredential, SharedSecretVerifier, TsvFile,
};
use gridlet_core::broker::{BrokerState, Leadership, Role};
use gridlet_core::methods;
use gridlet_core::monitor::{
    HostSource, LoadSample, MetricSource, MonitorError, WeightVector, FALLBACK_CLOCK_MHZ,
};
use gridlet_core::rpc::Hop;
use gridlet_core::worker::{Executor, FileService, LocalProcessExecutor, Worker};

use crate::config::{Config, MetricsKind};

pub const ACL_FILE: &str = "acl.tsv";
pub const BROKER_FILE: &str = "broker.json";

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("acl: {0}")]
    Acl(#[from] gridlet_core::acl::AclError),
    #[error("worker: {0}")]
    Worker(#[from] gridlet_core::worker::WorkerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The VO carried by node-to-node credentials.
pub const NODE_VO: &str = "node";

pub fn node_dn(peer_id: &str) -> String {
    format!("/O=gridlet/CN={peer_id}")
}

pub struct Node {
    pub(crate) config: Config,
    pub(crate) peer_id: String,
    pub(crate) url: String,
    pub(crate) verifier: SharedSecretVerifier,
    credential: Vec<u8>,
    pub(crate) acl: AclStore,
    pub(crate) sessions: Mutex<HashMap<String, Identity>>,
    pub(crate) broker: Mutex<BrokerState>,
    broker_path: PathBuf,
    pub(crate) files: FileService,
    pub(crate) worker: Option<Worker>,
    pub(crate) incoming_dir: PathBuf,
    metrics: Mutex<Box<dyn MetricSource>>,
    pub(crate) weights: WeightVector,
    /// Consecutive failed report deliveries.
    pub(crate) failures: AtomicU32,
    pub(crate) registered: AtomicBool,
    /// Registry version each peer has acknowledged, by URL.
    pub(crate) synced: Mutex<HashMap<String, u64>>,
    /// Brokers this node has displaced; they keep hearing announcements.
    pub(crate) displaced: Mutex<BTreeSet<String>>,
    pub(crate) report_now: Notify,
}

impl Node {
    /// Opens all persistent state under the configured data directory.
    /// Must run inside a tokio runtime.
    pub fn open(config: Config, url: String) -> Result<Arc<Node>, StartError> {
        config.validate()?;
        let data = config.node.data_dir.clone();
        std::fs::create_dir_all(&data)?;
        let publish = config.publish_dir();
        std::fs::create_dir_all(&publish)?;
        let files = FileService::open(&publish)?;

        let acl_file = TsvFile::new(data.join(ACL_FILE));
        let fresh = !acl_file.exists();
        let acl = AclStore::open(Box::new(acl_file))?;
        if fresh {
            for vo in &config.acl.bootstrap_vos {
                for service in methods::services() {
                    acl.add_unchecked(AclEntry::allow_vo(vo, service))?;
                }
            }
        }

        let peer_id = config.broker.peer_id.clone();
        let broker_path = data.join(BROKER_FILE);
        let broker = match BrokerState::load(&broker_path)? {
            Some(b) => b,
            None if config.broker.leader => BrokerState::new(
                Role::Leader,
                Leadership {
                    epoch: 0,
                    leader_url: url.clone(),
                    leader_id: peer_id.clone(),
                },
            ),
            // the leader's id is learned on first contact
            None => BrokerState::new(
                Role::Standby,
                Leadership {
                    epoch: 0,
                    leader_url: config.broker.url.clone().unwrap_or_default(),
                    leader_id: String::new(),
                },
            ),
        };
        broker.save(&broker_path)?;

        let executor: Option<Arc<dyn Executor>> = if config.node.worker {
            let staging = data.join("staging");
            std::fs::create_dir_all(&staging)?;
            let last = Worker::last_cluster_id(&staging)?;
            Some(Arc::new(LocalProcessExecutor::new(config.node.slots, last)))
        } else {
            None
        };
        let worker = match &executor {
            Some(e) => Some(Worker::open(
                data.join("staging"),
                FileService::open(&publish)?,
                e.clone(),
            )?),
            None => None,
        };
        let metrics: Box<dyn MetricSource> = match (config.node.metrics, &executor) {
            (MetricsKind::Slots, Some(e)) => Box::new(SlotSource(e.clone())),
            _ => Box::new(HostSource::new()),
        };
        let credential = SharedSecretCredential {
            dn: node_dn(&peer_id),
            vos: vec![NODE_VO.into()],
            secret: config.node.secret.clone(),
        }
        .to_bytes();

        Ok(Arc::new(Node {
            verifier: SharedSecretVerifier::new(config.node.secret.clone()),
            weights: config.weights()?,
            incoming_dir: data.join("incoming"),
            config,
            peer_id,
            url,
            credential,
            acl,
            sessions: Mutex::new(HashMap::new()),
            broker: Mutex::new(broker),
            broker_path,
            files,
            worker,
            metrics: Mutex::new(metrics),
            failures: AtomicU32::new(0),
            registered: AtomicBool::new(false),
            synced: Mutex::new(HashMap::new()),
            displaced: Mutex::new(BTreeSet::new()),
            report_now: Notify::new(),
        }))
    }

    pub fn peer_id(&self) -> &str {
        &self.peer_id
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.broker.lock().role
    }

    pub fn leadership(&self) -> Leadership {
        self.broker.lock().leadership.clone()
    }

    /// A copy of the broker state, for inspection.
    pub fn broker_state(&self) -> BrokerState {
        self.broker.lock().clone()
    }

    pub fn worker(&self) -> Option<&Worker> {
        self.worker.as_ref()
    }

    /// A client speaking to another node under this node's identity.
    pub(crate) fn client(&self, url: &str, timeout: Duration) -> RpcClient {
        RpcClient::new(url)
            .with_auth(Auth::Credential(self.credential.clone()))
            .with_timeout(timeout)
    }

    pub(crate) fn relay_client(&self, url: &str, hop: Hop) -> RpcClient {
        self.client(url, Duration::from_secs(120)).with_hop(hop)
    }

    pub(crate) fn probe_client(&self, url: &str) -> RpcClient {
        self.client(url, self.config.probe_timeout())
    }

    pub(crate) fn save_broker(&self, state: &BrokerState) {
        if let Err(e) = state.save(&self.broker_path) {
            tracing::error!("persisting broker state: {e}");
        }
    }

    /// Applies an offered leadership. A node that has not yet learned who
    /// leads takes the first offer. Returns true if adopted.
    pub(crate) fn observe_leadership(&self, offered: Leadership) -> bool {
        let mut b = self.broker.lock();
        let before = b.leadership.clone();
        let adopted = if before.leader_id.is_empty() && b.role == Role::Standby {
            b.role = if offered.leader_id == self.peer_id {
                Role::Leader
            } else {
                Role::Standby
            };
            b.leadership = offered;
            true
        } else {
            b.observe_announce(offered, &self.peer_id)
        };
        if b.leadership != before {
            tracing::info!(
                "{}: leader is now {} ({}) epoch {}",
                self.peer_id,
                b.leadership.leader_id,
                b.leadership.leader_url,
                b.leadership.epoch
            );
            self.save_broker(&b);
        }
        adopted
    }

    pub(crate) fn sample(&self) -> Result<LoadSample, MonitorError> {
        self.metrics.lock().sample()
    }
}

/// Derives a sample from executor occupancy: busy slots drive the CPU
/// figure and queue length the load and process counts.
struct SlotSource(Arc<dyn Executor>);

impl MetricSource for SlotSource {
    fn sample(&mut self) -> Result<LoadSample, MonitorError> {
        let load = self.0.load();
        let slots = load.slots.max(1);
        let busy = (load.running + load.queued).min(slots);
        let pending = load.running + load.queued;
        Ok(LoadSample {
            cpu_usage: busy as f64 / slots as f64 * 100.0,
            load1: pending as f64,
            load5: pending as f64,
            load15: pending as f64,
            nprocs: pending as u32,
            ..LoadSample::idle(FALLBACK_CLOCK_MHZ)
        })
    }
}
