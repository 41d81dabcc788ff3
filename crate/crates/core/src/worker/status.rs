use std::fmt;
use std::str::FromStr;

use crate::rpc::{RpcValue, ValueError};

/// State of one run (one input file) of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunState {
    Queued,
    Running,
    Completed,
    Failed,
    Killed,
    Unknown,
}

impl RunState {
    pub const ALL: [RunState; 6] = [
        RunState::Queued,
        RunState::Running,
        RunState::Completed,
        RunState::Failed,
        RunState::Killed,
        RunState::Unknown,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RunState::Completed | RunState::Failed | RunState::Killed
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Queued => "queued",
            RunState::Running => "running",
            RunState::Completed => "completed",
            RunState::Failed => "failed",
            RunState::Killed => "killed",
            RunState::Unknown => "unknown",
        }
    }
}

impl fmt::Display for RunState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunState {
    type Err = ValueError;

    fn from_str(s: &str) -> Result<Self, ValueError> {
        RunState::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| ValueError(format!("unknown run state `{s}`")))
    }
}

/// Folds per-run states into the job's aggregate state:
/// killed if any run was killed, else failed if any failed, else completed
/// when every run completed, else running if any runs, else queued.
pub fn aggregate(runs: &[RunState]) -> RunState {
    if runs.contains(&RunState::Killed) {
        RunState::Killed
    } else if runs.contains(&RunState::Failed) {
        RunState::Failed
    } else if runs.iter().all(|r| *r == RunState::Completed) {
        RunState::Completed
    } else if runs.contains(&RunState::Running) {
        RunState::Running
    } else {
        RunState::Queued
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobStatus {
    pub job_id: String,
    pub runs: Vec<RunState>,
    pub aggregate: RunState,
}

impl JobStatus {
    pub fn new(job_id: impl Into<String>, runs: Vec<RunState>) -> Self {
        let aggregate = aggregate(&runs);
        JobStatus {
            job_id: job_id.into(),
            runs,
            aggregate,
        }
    }

    pub fn to_rpc(&self) -> RpcValue {
        RpcValue::record([
            ("job_id", RpcValue::from(self.job_id.as_str())),
            ("aggregate", RpcValue::from(self.aggregate.as_str())),
            (
                "runs",
                RpcValue::Array(
                    self.runs
                        .iter()
                        .map(|r| RpcValue::from(r.as_str()))
                        .collect(),
                ),
            ),
        ])
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        let runs = v
            .member("runs")?
            .string_list()?
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(JobStatus {
            job_id: v.member("job_id")?.as_str()?.to_owned(),
            aggregate: v.member("aggregate")?.as_str()?.parse()?,
            runs,
        })
    }
}
