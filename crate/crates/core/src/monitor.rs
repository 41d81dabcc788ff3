//! Host load sampling and the load coefficient used for routing.
//!
//! The coefficient is `clock_rate / (1 - cpu_usage/100) + Σ aᵢ·Mᵢ` where the
//! monitoring parameters `M` are memory usage, disk I/O, 1-minute load and
//! process count. Lower means less loaded. Units are deliberately mixed; the
//! value is only ever used to rank hosts against each other.

use std::collections::VecDeque;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::rpc::{RpcValue, ValueError};

/// CPU usage is clamped to this before evaluating the reciprocal term.
pub const CPU_USAGE_CLAMP: f64 = 99.9;
/// Default publishing interval, in seconds.
pub const DEFAULT_INTERVAL_S: f64 = 10.0;
/// Clock rate assumed when the host does not expose one.
pub const FALLBACK_CLOCK_MHZ: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSample {
    /// Percent, 0..=100.
    pub cpu_usage: f64,
    /// MHz, > 0.
    pub clock_rate: f64,
    /// Percent, 0..=100.
    pub mem_usage: f64,
    /// Mbps.
    pub disk_io: f64,
    pub load1: f64,
    /// Reported for display only.
    pub load5: f64,
    /// Reported for display only.
    pub load15: f64,
    pub nprocs: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MonitorError {
    #[error("metric source unavailable: {0}")]
    SourceUnavailable(String),
    #[error("invalid load sample: {0}")]
    InvalidSample(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
}

impl LoadSample {
    pub fn idle(clock_rate: f64) -> Self {
        LoadSample {
            cpu_usage: 0.0,
            clock_rate,
            mem_usage: 0.0,
            disk_io: 0.0,
            load1: 0.0,
            load5: 0.0,
            load15: 0.0,
            nprocs: 0,
        }
    }

    pub fn validate(&self) -> Result<(), MonitorError> {
        let bad = |what: &str, v: f64| Err(MonitorError::InvalidSample(format!("{what} = {v}")));
        let all = [
            self.cpu_usage,
            self.clock_rate,
            self.mem_usage,
            self.disk_io,
            self.load1,
            self.load5,
            self.load15,
        ];
        if let Some(v) = all.iter().find(|v| !v.is_finite()) {
            return bad("non-finite metric", *v);
        }
        if !(0.0..=100.0).contains(&self.cpu_usage) {
            return bad("cpu_usage", self.cpu_usage);
        }
        if !(0.0..=100.0).contains(&self.mem_usage) {
            return bad("mem_usage", self.mem_usage);
        }
        if self.clock_rate <= 0.0 {
            return bad("clock_rate", self.clock_rate);
        }
        if self.disk_io < 0.0 {
            return bad("disk_io", self.disk_io);
        }
        if self.load1 < 0.0 || self.load5 < 0.0 || self.load15 < 0.0 {
            return bad("load average", self.load1.min(self.load5).min(self.load15));
        }
        Ok(())
    }

    /// Forces every field into its valid range. Non-finite values become 0
    /// (or the fallback clock rate).
    pub fn clamped(mut self) -> Self {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_finite() { v.clamp(lo, hi) } else { lo };
        self.cpu_usage = fix(self.cpu_usage, 0.0, 100.0);
        self.mem_usage = fix(self.mem_usage, 0.0, 100.0);
        self.disk_io = fix(self.disk_io, 0.0, f64::MAX);
        self.load1 = fix(self.load1, 0.0, f64::MAX);
        self.load5 = fix(self.load5, 0.0, f64::MAX);
        self.load15 = fix(self.load15, 0.0, f64::MAX);
        if !(self.clock_rate.is_finite() && self.clock_rate > 0.0) {
            self.clock_rate = FALLBACK_CLOCK_MHZ;
        }
        self
    }

    /// The weighted parameters in weight order.
    pub fn parameters(&self) -> [f64; 4] {
        [
            self.mem_usage,
            self.disk_io,
            self.load1,
            f64::from(self.nprocs),
        ]
    }

    pub fn to_rpc(&self) -> RpcValue {
        RpcValue::record([
            ("cpu_usage", RpcValue::Double(self.cpu_usage)),
            ("clock_rate", RpcValue::Double(self.clock_rate)),
            ("mem_usage", RpcValue::Double(self.mem_usage)),
            ("disk_io", RpcValue::Double(self.disk_io)),
            ("load1", RpcValue::Double(self.load1)),
            ("load5", RpcValue::Double(self.load5)),
            ("load15", RpcValue::Double(self.load15)),
            (
                "nprocs",
                RpcValue::Int(i32::try_from(self.nprocs).unwrap_or(i32::MAX)),
            ),
        ])
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        let f = |k: &str| v.member(k)?.as_f64();
        let opt = |k: &str| v.get(k).map_or(Ok(0.0), RpcValue::as_f64);
        let nprocs = v.member("nprocs")?.as_f64()?;
        Ok(LoadSample {
            cpu_usage: f("cpu_usage")?,
            clock_rate: f("clock_rate")?,
            mem_usage: f("mem_usage")?,
            disk_io: f("disk_io")?,
            load1: f("load1")?,
            load5: opt("load5")?,
            load15: opt("load15")?,
            nprocs: if nprocs >= 0.0 { nprocs as u32 } else { 0 },
        })
    }
}

/// Non-negative weights for (mem_usage, disk_io, load1, nprocs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightVector([f64; 4]);

impl WeightVector {
    pub fn new(weights: [f64; 4]) -> Result<Self, MonitorError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MonitorError::InvalidWeights(format!("{weights:?}")));
        }
        Ok(WeightVector(weights))
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }
}

impl Default for WeightVector {
    fn default() -> Self {
        WeightVector([1.0; 4])
    }
}

/// Computes the load coefficient. CPU usage is clamped to
/// [`CPU_USAGE_CLAMP`] so the reciprocal term stays finite.
pub fn load_coefficient(sample: &LoadSample, weights: &WeightVector) -> f64 {
    let cpu = sample.cpu_usage.clamp(0.0, CPU_USAGE_CLAMP);
    let free_fraction = 1.0 - cpu / 100.0;
    let cpu_term = sample.clock_rate / free_fraction;
    let extra: f64 = weights
        .0
        .iter()
        .zip(sample.parameters())
        .map(|(a, m)| a * m)
        .sum();
    cpu_term + extra
}

/// What an agent publishes to the broker.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub peer_url: String,
    pub coefficient: f64,
    pub sample: LoadSample,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

impl LoadReport {
    pub fn new(
        peer_url: impl Into<String>,
        sample: LoadSample,
        weights: &WeightVector,
        timestamp: i64,
    ) -> Self {
        LoadReport {
            peer_url: peer_url.into(),
            coefficient: load_coefficient(&sample, weights),
            sample,
            timestamp,
        }
    }

    /// Parameters of a `monitor.report` call.
    pub fn to_params(&self) -> Vec<RpcValue> {
        vec![
            RpcValue::String(self.peer_url.clone()),
            RpcValue::Double(self.coefficient),
            RpcValue::Int(i32::try_from(self.timestamp).unwrap_or(i32::MAX)),
            self.sample.to_rpc(),
        ]
    }

    pub fn from_params(params: &[RpcValue]) -> Result<Self, ValueError> {
        let [url, coeff, ts, sample] = params else {
            return Err(ValueError(format!(
                "monitor.report takes 4 parameters, got {}",
                params.len()
            )));
        };
        Ok(LoadReport {
            peer_url: url.as_str()?.to_owned(),
            coefficient: coeff.as_f64()?,
            timestamp: i64::from(ts.as_i32()?),
            sample: LoadSample::from_rpc(sample)?,
        })
    }
}

pub fn now_epoch_secs() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Anything able to produce load samples.
pub trait MetricSource: Send {
    fn sample(&mut self) -> Result<LoadSample, MonitorError>;
}

/// Replays a fixed script of samples; optionally repeats the last one forever.
#[derive(Debug, Clone)]
pub struct ScriptedSource {
    script: VecDeque<LoadSample>,
    last: Option<LoadSample>,
    repeat_last: bool,
}

impl ScriptedSource {
    pub fn new(script: impl IntoIterator<Item = LoadSample>) -> Self {
        ScriptedSource {
            script: script.into_iter().collect(),
            last: None,
            repeat_last: false,
        }
    }

    /// A source that always returns `sample`.
    pub fn constant(sample: LoadSample) -> Self {
        ScriptedSource {
            script: VecDeque::from([sample]),
            last: None,
            repeat_last: true,
        }
    }
}

impl MetricSource for ScriptedSource {
    fn sample(&mut self) -> Result<LoadSample, MonitorError> {
        match self.script.pop_front() {
            Some(s) => {
                s.validate()?;
                self.last = Some(s);
                Ok(s)
            }
            None if self.repeat_last => self
                .last
                .ok_or_else(|| MonitorError::SourceUnavailable("empty script".into())),
            None => Err(MonitorError::SourceUnavailable("script exhausted".into())),
        }
    }
}

/// Samples the local host through `sysinfo`.
pub struct HostSource {
    system: sysinfo::System,
    disks: sysinfo::Disks,
    last_refresh: Instant,
}

impl HostSource {
    pub fn new() -> Self {
        let mut system = sysinfo::System::new();
        system.refresh_cpu_all();
        system.refresh_memory();
        HostSource {
            system,
            disks: sysinfo::Disks::new_with_refreshed_list(),
            last_refresh: Instant::now(),
        }
    }
}

impl Default for HostSource {
    fn default() -> Self {
        Self::new()
    }
}

impl MetricSource for HostSource {
    fn sample(&mut self) -> Result<LoadSample, MonitorError> {
        self.system.refresh_cpu_all();
        self.system.refresh_memory();
        self.system
            .refresh_processes(sysinfo::ProcessesToUpdate::All, true);
        self.disks.refresh(false);
        let elapsed = self.last_refresh.elapsed().as_secs_f64().max(1e-3);
        self.last_refresh = Instant::now();

        let cpus = self.system.cpus();
        if cpus.is_empty() {
            return Err(MonitorError::SourceUnavailable("no CPUs reported".into()));
        }
        let clock = cpus.iter().map(|c| c.frequency()).max().unwrap_or(0) as f64;
        let total_mem = self.system.total_memory();
        let mem_usage = if total_mem > 0 {
            self.system.used_memory() as f64 / total_mem as f64 * 100.0
        } else {
            0.0
        };
        let io_bytes: u64 = self
            .disks
            .list()
            .iter()
            .map(|d| {
                let u = d.usage();
                u.read_bytes + u.written_bytes
            })
            .sum();
        let load = sysinfo::System::load_average();
        let sample = LoadSample {
            cpu_usage: f64::from(self.system.global_cpu_usage()),
            clock_rate: if clock > 0.0 {
                clock
            } else {
                FALLBACK_CLOCK_MHZ
            },
            mem_usage,
            disk_io: io_bytes as f64 * 8.0 / 1e6 / elapsed,
            load1: load.one,
            load5: load.five,
            load15: load.fifteen,
            nprocs: u32::try_from(self.system.processes().len()).unwrap_or(u32::MAX),
        };
        Ok(sample.clamped())
    }
}
