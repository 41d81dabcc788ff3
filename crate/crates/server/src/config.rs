use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use gridlet_core::monitor::{MonitorError, WeightVector, DEFAULT_INTERVAL_S};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<MonitorError> for ConfigError {
    fn from(e: MonitorError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// Node configuration, usually read from a TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub node: NodeConfig,
    pub broker: BrokerConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub acl: AclConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    /// Address to bind, e.g. `127.0.0.1:7070`. Port 0 picks a free port.
    #[serde(default = "default_listen")]
    pub listen: String,
    /// URL other nodes use to reach this one. Derived from the bound
    /// address when absent.
    pub url: Option<String>,
    /// Holds the ACL, broker state, staging area and, by default, the
    /// publishing area.
    pub data_dir: PathBuf,
    pub publish_dir: Option<PathBuf>,
    /// Shared secret accepted in credentials.
    pub secret: String,
    /// Whether this node executes jobs and registers with the broker.
    #[serde(default)]
    pub worker: bool,
    #[serde(default = "default_slots")]
    pub slots: usize,
    #[serde(default)]
    pub metrics: MetricsKind,
    /// Static files served under `/ui/`.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsKind {
    /// Sample the real host.
    #[default]
    Host,
    /// Derive the sample from executor slot occupancy. Useful when several
    /// workers share one host.
    Slots,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    pub peer_id: String,
    /// Start as the leading broker.
    #[serde(default)]
    pub leader: bool,
    /// The leader to register with. Required unless `leader` is set.
    pub url: Option<String>,
    /// Defaults to three monitor intervals.
    pub freshness_window_s: Option<f64>,
    #[serde(default = "default_failover_k")]
    pub failover_k: u32,
    #[serde(default = "default_probe_timeout")]
    pub probe_timeout_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    #[serde(default = "default_interval")]
    pub interval_s: f64,
    #[serde(default = "default_weights")]
    pub weights: [f64; 4],
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            interval_s: default_interval(),
            weights: default_weights(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AclConfig {
    /// VOs granted every service when the ACL file is first created.
    #[serde(default = "default_bootstrap_vos")]
    pub bootstrap_vos: Vec<String>,
}

impl Default for AclConfig {
    fn default() -> Self {
        AclConfig {
            bootstrap_vos: default_bootstrap_vos(),
        }
    }
}

fn default_listen() -> String {
    "127.0.0.1:7070".into()
}

fn default_slots() -> usize {
    1
}

fn default_failover_k() -> u32 {
    3
}

fn default_probe_timeout() -> f64 {
    1.0
}

fn default_interval() -> f64 {
    DEFAULT_INTERVAL_S
}

fn default_weights() -> [f64; 4] {
    [1.0; 4]
}

fn default_bootstrap_vos() -> Vec<String> {
    vec!["admin".into(), "node".into()]
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if !(self.monitor.interval_s > 0.0 && self.monitor.interval_s.is_finite()) {
            return bad("monitor.interval_s must be positive");
        }
        self.weights()?;
        if self.broker.peer_id.is_empty()
            || !gridlet_core::worker::is_plain_name(&self.broker.peer_id)
        {
            return bad("broker.peer_id must be a plain non-empty name");
        }
        if !self.broker.leader && self.broker.url.is_none() {
            return bad("broker.url is required unless broker.leader is set");
        }
        if self.broker.failover_k == 0 {
            return bad("broker.failover_k must be at least 1");
        }
        if self.freshness_window_s() <= 0.0 {
            return bad("broker.freshness_window_s must be positive");
        }
        if self.broker.probe_timeout_s.is_nan() || self.broker.probe_timeout_s <= 0.0 {
            return bad("broker.probe_timeout_s must be positive");
        }
        if self.node.worker && self.node.slots == 0 {
            return bad("node.slots must be at least 1");
        }
        if self.node.secret.is_empty() {
            return bad("node.secret must not be empty");
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<WeightVector, ConfigError> {
        Ok(WeightVector::new(self.monitor.weights)?)
    }

    pub fn interval(&self) -> Duration {
        Duration::from_secs_f64(self.monitor.interval_s)
    }

    pub fn freshness_window_s(&self) -> f64 {
        self.broker
            .freshness_window_s
            .unwrap_or(3.0 * self.monitor.interval_s)
    }

    pub fn probe_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.broker.probe_timeout_s)
    }

    pub fn publish_dir(&self) -> PathBuf {
        self.node
            .publish_dir
            .clone()
            .unwrap_or_else(|| self.node.data_dir.join("pub"))
    }
}
