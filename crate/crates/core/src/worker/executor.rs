//! Pluggable job executors. The bundled one runs each run directory as a
//! local process, with a fixed number of concurrent slots.

use std::collections::HashMap;
use std::fs::File;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use tokio::runtime::Handle;
use tokio::sync::{Notify, Semaphore};

use super::{RunState, WorkerError};

pub type ClusterId = u64;

/// One run, ready to start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSpec {
    pub dir: PathBuf,
    pub program: PathBuf,
    pub args: Vec<String>,
    /// File names inside `dir` receiving stdout / stderr.
    pub stdout: Option<String>,
    pub stderr: Option<String>,
}

/// Slot occupancy, used to derive a load sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecutorLoad {
    pub slots: usize,
    pub running: usize,
    pub queued: usize,
}

pub trait Executor: Send + Sync {
    /// Queues a run and returns its cluster id. Processes start
    /// asynchronously; start failures show up as `Failed` states.
    fn submit(&self, run: RunSpec) -> Result<ClusterId, WorkerError>;
    fn query(&self, clusters: &[ClusterId]) -> Vec<RunState>;
    /// Terminates a cluster. Terminal clusters are left alone.
    fn kill(&self, cluster: ClusterId) -> Result<(), WorkerError>;
    fn load(&self) -> ExecutorLoad {
        ExecutorLoad::default()
    }
}

struct RunEntry {
    state: RunState,
    kill: Arc<Notify>,
}

struct Inner {
    slots: usize,
    semaphore: Arc<Semaphore>,
    next_id: AtomicU64,
    runs: Mutex<HashMap<ClusterId, RunEntry>>,
}

impl Inner {
    fn set(&self, id: ClusterId, state: RunState) {
        if let Some(e) = self.runs.lock().get_mut(&id) {
            // killed and other terminal states stick
            if !e.state.is_terminal() {
                e.state = state;
            }
        }
    }

    fn state(&self, id: ClusterId) -> RunState {
        self.runs
            .lock()
            .get(&id)
            .map_or(RunState::Unknown, |e| e.state)
    }
}

#[derive(Clone)]
pub struct LocalProcessExecutor {
    inner: Arc<Inner>,
    handle: Handle,
}

impl LocalProcessExecutor {
    /// Must be called within a tokio runtime. Cluster ids start after
    /// `last_cluster_id` so they stay unique across restarts.
    pub fn new(slots: usize, last_cluster_id: ClusterId) -> Self {
        let slots = slots.max(1);
        LocalProcessExecutor {
            inner: Arc::new(Inner {
                slots,
                semaphore: Arc::new(Semaphore::new(slots)),
                next_id: AtomicU64::new(last_cluster_id + 1),
                runs: Mutex::new(HashMap::new()),
            }),
            handle: Handle::current(),
        }
    }
}

fn spawn(run: &RunSpec) -> std::io::Result<tokio::process::Child> {
    let out = |name: &Option<String>| -> std::io::Result<Stdio> {
        Ok(match name {
            Some(n) => File::create(run.dir.join(n))?.into(),
            None => Stdio::null(),
        })
    };
    tokio::process::Command::new(&run.program)
        .args(&run.args)
        .current_dir(&run.dir)
        .stdin(Stdio::null())
        .stdout(out(&run.stdout)?)
        .stderr(out(&run.stderr)?)
        .process_group(0)
        .kill_on_drop(true)
        .spawn()
}

async fn run_one(inner: Arc<Inner>, id: ClusterId, run: RunSpec, kill: Arc<Notify>) {
    let permit = tokio::select! {
        p = inner.semaphore.clone().acquire_owned() => match p {
            Ok(p) => p,
            Err(_) => return inner.set(id, RunState::Failed),
        },
        _ = kill.notified() => return,
    };
    if inner.state(id) != RunState::Queued {
        return;
    }
    let mut attempt = 0;
    let child = loop {
        match spawn(&run) {
            // a freshly written executable may still be open in a child
            // forked concurrently by another thread
            Err(e) if e.raw_os_error() == Some(libc::ETXTBSY) && attempt < 50 => {
                attempt += 1;
                tokio::time::sleep(std::time::Duration::from_millis(10)).await;
            }
            r => break r,
        }
    };
    let mut child = match child {
        Ok(c) => c,
        Err(e) => {
            tracing::warn!(cluster = id, program = %run.program.display(), "spawn failed: {e}");
            return inner.set(id, RunState::Failed);
        }
    };
    inner.set(id, RunState::Running);
    let pid = child.id();
    tokio::select! {
        status = child.wait() => {
            let ok = matches!(status, Ok(s) if s.success());
            inner.set(id, if ok { RunState::Completed } else { RunState::Failed });
        }
        _ = kill.notified() => {
            if let Some(pid) = pid {
                // the whole process group, so children of shell scripts die too
                unsafe { libc::killpg(pid as libc::pid_t, libc::SIGKILL) };
            }
            let _ = child.kill().await;
        }
    }
    drop(permit);
}

impl Executor for LocalProcessExecutor {
    fn submit(&self, run: RunSpec) -> Result<ClusterId, WorkerError> {
        if !run.dir.is_dir() {
            return Err(WorkerError::Executor(format!(
                "run directory {} missing",
                run.dir.display()
            )));
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let kill = Arc::new(Notify::new());
        self.inner.runs.lock().insert(
            id,
            RunEntry {
                state: RunState::Queued,
                kill: kill.clone(),
            },
        );
        self.handle
            .spawn(run_one(self.inner.clone(), id, run, kill));
        Ok(id)
    }

    fn query(&self, clusters: &[ClusterId]) -> Vec<RunState> {
        let runs = self.inner.runs.lock();
        clusters
            .iter()
            .map(|id| runs.get(id).map_or(RunState::Unknown, |e| e.state))
            .collect()
    }

    fn kill(&self, cluster: ClusterId) -> Result<(), WorkerError> {
        let mut runs = self.inner.runs.lock();
        let Some(e) = runs.get_mut(&cluster) else {
            return Ok(());
        };
        if !e.state.is_terminal() {
            e.state = RunState::Killed;
            e.kill.notify_one();
        }
        Ok(())
    }

    fn load(&self) -> ExecutorLoad {
        let runs = self.inner.runs.lock();
        let mut load = ExecutorLoad {
            slots: self.inner.slots,
            ..Default::default()
        };
        for e in runs.values() {
            match e.state {
                RunState::Running => load.running += 1,
                RunState::Queued => load.queued += 1,
                _ => {}
            }
        }
        load
    }
}
