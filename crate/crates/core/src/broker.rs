//! Broker state: the peer registry, load-aware target selection, the
//! job-ID→peer index and leadership bookkeeping for failover.
//!
//! Everything here is synchronous and transport-free; the server wraps a
//! [`BrokerState`] in a lock and drives it from RPC handlers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::monitor::{LoadReport, LoadSample};
use crate::rpc::{RpcValue, ValueError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BrokerError {
    #[error("no registered peer has URL {0}")]
    UnknownPeer(String),
    #[error("no peer has reported within the freshness window")]
    NoFreshPeers,
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("stale epoch {offered} (current {current})")]
    StaleEpoch { offered: u32, current: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerLoad {
    pub coefficient: f64,
    /// Seconds since the Unix epoch, as stamped by the reporting agent.
    pub timestamp: i64,
    pub sample: Option<LoadSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerInfo {
    pub peer_id: String,
    pub url: String,
    pub last_report: Option<PeerLoad>,
    pub registered_at: i64,
}

impl PeerInfo {
    pub fn new(peer_id: impl Into<String>, url: impl Into<String>, registered_at: i64) -> Self {
        PeerInfo {
            peer_id: peer_id.into(),
            url: url.into(),
            last_report: None,
            registered_at,
        }
    }

    pub fn with_report(mut self, coefficient: f64, timestamp: i64) -> Self {
        self.last_report = Some(PeerLoad {
            coefficient,
            timestamp,
            sample: None,
        });
        self
    }

    pub fn is_fresh(&self, now: i64, window_s: f64) -> bool {
        self.last_report
            .as_ref()
            .is_some_and(|r| r.timestamp as f64 >= now as f64 - window_s)
    }

    pub fn to_rpc(&self) -> RpcValue {
        let mut m = vec![
            ("peer_id".to_owned(), RpcValue::from(self.peer_id.as_str())),
            ("url".to_owned(), RpcValue::from(self.url.as_str())),
            (
                "registered_at".to_owned(),
                RpcValue::Int(clamp_i32(self.registered_at)),
            ),
        ];
        if let Some(r) = &self.last_report {
            m.push(("coefficient".to_owned(), RpcValue::Double(r.coefficient)));
            m.push((
                "timestamp".to_owned(),
                RpcValue::Int(clamp_i32(r.timestamp)),
            ));
            if let Some(s) = &r.sample {
                m.push(("sample".to_owned(), s.to_rpc()));
            }
        }
        RpcValue::Struct(m)
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        let last_report = match (v.get("coefficient"), v.get("timestamp")) {
            (Some(c), Some(t)) => Some(PeerLoad {
                coefficient: c.as_f64()?,
                timestamp: i64::from(t.as_i32()?),
                sample: v.get("sample").map(LoadSample::from_rpc).transpose()?,
            }),
            _ => None,
        };
        Ok(PeerInfo {
            peer_id: v.member("peer_id")?.as_str()?.to_owned(),
            url: v.member("url")?.as_str()?.to_owned(),
            registered_at: i64::from(v.member("registered_at")?.as_i32()?),
            last_report,
        })
    }
}

fn clamp_i32(v: i64) -> i32 {
    i32::try_from(v).unwrap_or(if v < 0 { i32::MIN } else { i32::MAX })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobIndexEntry {
    pub job_id: String,
    pub owner_peer: String,
    pub submitted_at: i64,
    pub client_dn: String,
}

impl JobIndexEntry {
    pub fn to_rpc(&self) -> RpcValue {
        RpcValue::record([
            ("job_id", RpcValue::from(self.job_id.as_str())),
            ("owner_peer", RpcValue::from(self.owner_peer.as_str())),
            ("submitted_at", RpcValue::Int(clamp_i32(self.submitted_at))),
            ("client_dn", RpcValue::from(self.client_dn.as_str())),
        ])
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        Ok(JobIndexEntry {
            job_id: v.member("job_id")?.as_str()?.to_owned(),
            owner_peer: v.member("owner_peer")?.as_str()?.to_owned(),
            submitted_at: i64::from(v.member("submitted_at")?.as_i32()?),
            client_dn: v.member("client_dn")?.as_str()?.to_owned(),
        })
    }
}

/// Formats a job id as `J-<owner>-<seq>`.
pub fn format_job_id(owner_peer: &str, seq: u64) -> String {
    format!("J-{owner_peer}-{seq}")
}

/// Splits a job id into owner hint and sequence number.
pub fn parse_job_id(job_id: &str) -> Option<(&str, u64)> {
    let rest = job_id.strip_prefix("J-")?;
    let (owner, seq) = rest.rsplit_once('-')?;
    if owner.is_empty() {
        return None;
    }
    Some((owner, seq.parse().ok()?))
}

/// Picks the fresh peer with the smallest coefficient. Ties go to the
/// lexicographically smallest peer id.
pub fn select_target<'a, I>(peers: I, now: i64, window_s: f64) -> Result<&'a PeerInfo, BrokerError>
where
    I: IntoIterator<Item = &'a PeerInfo>,
{
    let mut best: Option<(&PeerInfo, f64)> = None;
    for p in peers {
        if !p.is_fresh(now, window_s) {
            continue;
        }
        let c = p
            .last_report
            .as_ref()
            .map(|r| r.coefficient)
            .unwrap_or(f64::INFINITY);
        best = match best {
            None => Some((p, c)),
            Some((b, bc)) if c < bc || (c == bc && p.peer_id < b.peer_id) => Some((p, c)),
            keep => keep,
        };
    }
    best.map(|(p, _)| p).ok_or(BrokerError::NoFreshPeers)
}

/// The deterministic election rule: the smallest live peer id wins.
pub fn elect<'a>(live_peer_ids: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    live_peer_ids.into_iter().min()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Leader,
    Standby,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Leader => "leader",
            Role::Standby => "standby",
        }
    }
}

/// Who currently leads, and under which epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leadership {
    pub epoch: u32,
    pub leader_url: String,
    pub leader_id: String,
}

impl Leadership {
    /// Higher epoch wins; equal epochs fall back to the smaller peer id.
    pub fn supersedes(&self, other: &Leadership) -> bool {
        self.epoch > other.epoch || (self.epoch == other.epoch && self.leader_id < other.leader_id)
    }
}

/// The replicated portion of broker state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerSnapshot {
    pub leadership: Leadership,
    pub version: u64,
    pub next_seq: u64,
    pub peers: Vec<PeerInfo>,
    pub jobs: Vec<JobIndexEntry>,
}

impl BrokerSnapshot {
    pub fn to_rpc(&self) -> RpcValue {
        RpcValue::record([
            ("epoch", RpcValue::Int(self.leadership.epoch as i32)),
            (
                "leader_url",
                RpcValue::from(self.leadership.leader_url.as_str()),
            ),
            (
                "leader_id",
                RpcValue::from(self.leadership.leader_id.as_str()),
            ),
            ("version", RpcValue::from(self.version.to_string())),
            ("next_seq", RpcValue::from(self.next_seq.to_string())),
            (
                "peers",
                RpcValue::Array(self.peers.iter().map(PeerInfo::to_rpc).collect()),
            ),
            (
                "jobs",
                RpcValue::Array(self.jobs.iter().map(JobIndexEntry::to_rpc).collect()),
            ),
        ])
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        let num = |k: &str| -> Result<u64, ValueError> {
            let s = v.member(k)?.as_str()?;
            s.parse()
                .map_err(|_| ValueError(format!("`{k}` is not a counter: {s}")))
        };
        let epoch = v.member("epoch")?.as_i32()?;
        Ok(BrokerSnapshot {
            leadership: Leadership {
                epoch: u32::try_from(epoch)
                    .map_err(|_| ValueError(format!("negative epoch {epoch}")))?,
                leader_url: v.member("leader_url")?.as_str()?.to_owned(),
                leader_id: v.member("leader_id")?.as_str()?.to_owned(),
            },
            version: num("version")?,
            next_seq: num("next_seq")?,
            peers: v
                .member("peers")?
                .as_array()?
                .iter()
                .map(PeerInfo::from_rpc)
                .collect::<Result<_, _>>()?,
            jobs: v
                .member("jobs")?
                .as_array()?
                .iter()
                .map(JobIndexEntry::from_rpc)
                .collect::<Result<_, _>>()?,
        })
    }
}

/// Registry, index and leadership for one broker-capable node.
#[derive(Debug, Clone)]
pub struct BrokerState {
    pub role: Role,
    pub leadership: Leadership,
    peers: BTreeMap<String, PeerInfo>,
    jobs: BTreeMap<String, JobIndexEntry>,
    next_seq: u64,
    /// Bumped on every registry or index mutation (not on load reports).
    version: u64,
}

impl BrokerState {
    pub fn new(role: Role, leadership: Leadership) -> Self {
        BrokerState {
            role,
            leadership,
            peers: BTreeMap::new(),
            jobs: BTreeMap::new(),
            next_seq: 1,
            version: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn peers(&self) -> impl Iterator<Item = &PeerInfo> {
        self.peers.values()
    }

    pub fn peer(&self, peer_id: &str) -> Option<&PeerInfo> {
        self.peers.get(peer_id)
    }

    pub fn peer_by_url(&self, url: &str) -> Option<&PeerInfo> {
        self.peers.values().find(|p| p.url == url)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobIndexEntry> {
        self.jobs.values()
    }

    /// Inserts or updates a peer and returns the resulting registry.
    pub fn register(&mut self, peer_id: &str, url: &str, now: i64) -> Vec<PeerInfo> {
        match self.peers.get_mut(peer_id) {
            Some(p) => p.url = url.to_owned(),
            None => {
                self.peers
                    .insert(peer_id.to_owned(), PeerInfo::new(peer_id, url, now));
            }
        }
        self.version += 1;
        self.peers.values().cloned().collect()
    }

    /// Records a load report. A report never replaces one with a newer
    /// timestamp; equal timestamps replace (arrival order).
    pub fn ingest(&mut self, report: &LoadReport) -> Result<(), BrokerError> {
        let peer = self
            .peers
            .values_mut()
            .find(|p| p.url == report.peer_url)
            .ok_or_else(|| BrokerError::UnknownPeer(report.peer_url.clone()))?;
        if peer
            .last_report
            .as_ref()
            .is_some_and(|r| r.timestamp > report.timestamp)
        {
            return Ok(());
        }
        peer.last_report = Some(PeerLoad {
            coefficient: report.coefficient,
            timestamp: report.timestamp,
            sample: Some(report.sample),
        });
        Ok(())
    }

    pub fn select_target(&self, now: i64, window_s: f64) -> Result<&PeerInfo, BrokerError> {
        select_target(self.peers.values(), now, window_s)
    }

    /// Reserves the next job id for `owner_peer`.
    pub fn allocate_job_id(&mut self, owner_peer: &str) -> String {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.version += 1;
        format_job_id(owner_peer, seq)
    }

    pub fn insert_job(&mut self, entry: JobIndexEntry) {
        if let Some((_, seq)) = parse_job_id(&entry.job_id) {
            self.next_seq = self.next_seq.max(seq + 1);
        }
        self.jobs.insert(entry.job_id.clone(), entry);
        self.version += 1;
    }

    pub fn job(&self, job_id: &str) -> Result<&JobIndexEntry, BrokerError> {
        self.jobs
            .get(job_id)
            .ok_or_else(|| BrokerError::UnknownJob(job_id.to_owned()))
    }

    pub fn snapshot(&self) -> BrokerSnapshot {
        BrokerSnapshot {
            leadership: self.leadership.clone(),
            version: self.version,
            next_seq: self.next_seq,
            peers: self.peers.values().cloned().collect(),
            jobs: self.jobs.values().cloned().collect(),
        }
    }

    /// Adopts a snapshot pushed by the leader. Snapshots from an older epoch
    /// are refused; load reports already held locally are kept when newer.
    pub fn apply_snapshot(&mut self, snap: BrokerSnapshot) -> Result<(), BrokerError> {
        let current = &self.leadership;
        let same_leader = snap.leadership == *current;
        if !same_leader && !snap.leadership.supersedes(current) {
            return Err(BrokerError::StaleEpoch {
                offered: snap.leadership.epoch,
                current: current.epoch,
            });
        }
        let mut peers: BTreeMap<String, PeerInfo> = snap
            .peers
            .into_iter()
            .map(|p| (p.peer_id.clone(), p))
            .collect();
        for (id, p) in peers.iter_mut() {
            if let Some(local) = self.peers.get(id).and_then(|l| l.last_report.clone()) {
                let newer = p
                    .last_report
                    .as_ref()
                    .is_none_or(|r| r.timestamp < local.timestamp);
                if newer {
                    p.last_report = Some(local);
                }
            }
        }
        self.peers = peers;
        self.jobs = snap
            .jobs
            .into_iter()
            .map(|j| (j.job_id.clone(), j))
            .collect();
        self.next_seq = self.next_seq.max(snap.next_seq);
        self.version = snap.version;
        if !same_leader {
            self.leadership = snap.leadership;
        }
        Ok(())
    }

    /// Applies an announcement. Returns true if it was adopted.
    pub fn observe_announce(&mut self, offered: Leadership, self_id: &str) -> bool {
        if offered == self.leadership {
            return true;
        }
        if !offered.supersedes(&self.leadership) {
            return false;
        }
        self.role = if offered.leader_id == self_id {
            Role::Leader
        } else {
            Role::Standby
        };
        self.leadership = offered;
        true
    }

    /// Promotes this node to leader under a fresh epoch.
    pub fn promote(&mut self, self_id: &str, self_url: &str) -> Leadership {
        self.leadership = Leadership {
            epoch: self.leadership.epoch + 1,
            leader_url: self_url.to_owned(),
            leader_id: self_id.to_owned(),
        };
        self.role = Role::Leader;
        self.version += 1;
        self.leadership.clone()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let persisted = Persisted {
            role: self.role,
            snapshot: self.snapshot(),
        };
        let json = serde_json::to_vec_pretty(&persisted).map_err(std::io::Error::other)?;
        crate::fsutil::write_atomic(path, &json)
    }

    /// Loads persisted state, or `None` when the file does not exist.
    pub fn load(path: &Path) -> std::io::Result<Option<Self>> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let p: Persisted = serde_json::from_slice(&bytes).map_err(std::io::Error::other)?;
        let snap = p.snapshot;
        Ok(Some(BrokerState {
            role: p.role,
            leadership: snap.leadership,
            peers: snap
                .peers
                .into_iter()
                .map(|x| (x.peer_id.clone(), x))
                .collect(),
            jobs: snap
                .jobs
                .into_iter()
                .map(|j| (j.job_id.clone(), j))
                .collect(),
            next_seq: snap.next_seq,
            version: snap.version,
        }))
    }
}

#[derive(Serialize, Deserialize)]
struct Persisted {
    role: Role,
    snapshot: BrokerSnapshot,
}
