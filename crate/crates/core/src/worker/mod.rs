//! Worker-side job handling: staging, execution, status, outputs, and the
//! file service over the publishing area.

mod clusters;
mod executor;
pub mod files;
mod request;
mod staging;
mod status;
mod submit;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::rpc::{RpcValue, ValueError};

pub use clusters::ClusterMap;
pub use executor::{ClusterId, Executor, ExecutorLoad, LocalProcessExecutor, RunSpec};
pub use files::{FileEntry, FileService, GrepMatch};
pub use request::{input_base_name, JobRequest};
pub use staging::{run_dir_name, stage_job, Manifest, StagingLayout};
pub use status::{aggregate, JobStatus, RunState};
pub use submit::SubmitDescription;

pub const CLUSTERS_FILE: &str = "clusters.tsv";

#[derive(Debug, thiserror::Error)]
pub enum WorkerError {
    #[error("invalid job request: {0}")]
    InvalidRequest(String),
    #[error("job {0} already exists")]
    DuplicateJob(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("input fetch failed: {0}")]
    InputFetch(String),
    #[error("submit file: {0}")]
    SubmitParse(String),
    #[error("executor: {0}")]
    Executor(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("path {0} is outside the root")]
    OutsideRoot(String),
    #[error("bad pattern: {0}")]
    BadPattern(String),
    #[error("corrupt state: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single non-empty path component other than `.` and `..`.
pub fn is_plain_name(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\', '\0'])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub size: u64,
    pub md5: String,
}

impl OutputFile {
    pub fn to_rpc(&self) -> RpcValue {
        RpcValue::record([
            ("name", RpcValue::from(self.name.as_str())),
            ("size", RpcValue::from(self.size.to_string())),
            ("md5", RpcValue::from(self.md5.as_str())),
        ])
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        let size = v.member("size")?.as_str()?;
        Ok(OutputFile {
            name: v.member("name")?.as_str()?.to_owned(),
            size: size
                .parse()
                .map_err(|_| ValueError(format!("bad size `{size}`")))?,
            md5: v.member("md5")?.as_str()?.to_owned(),
        })
    }
}

/// A validated request with its parsed submit file.
#[derive(Debug, Clone)]
pub struct PreparedJob {
    pub request: JobRequest,
    pub description: SubmitDescription,
    pub executable_name: String,
}

/// Holds a job id between validation and a successful accept; dropping it
/// without [`Reservation::commit`] frees the id again.
pub struct Reservation<'a> {
    worker: &'a Worker,
    job_id: String,
    committed: bool,
}

impl Reservation<'_> {
    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        self.worker.reserved.lock().remove(&self.job_id);
        if !self.committed {
            let _ = std::fs::remove_dir_all(self.worker.staging_root.join(&self.job_id));
        }
    }
}

pub struct Worker {
    staging_root: PathBuf,
    files: FileService,
    executor: Arc<dyn Executor>,
    clusters: Mutex<ClusterMap>,
    reserved: Mutex<HashSet<String>>,
}

impl Worker {
    /// Opens the worker state under `staging_root`. The cluster map lives in
    /// `<staging_root>/clusters.tsv`.
    pub fn open(
        staging_root: impl Into<PathBuf>,
        files: FileService,
        executor: Arc<dyn Executor>,
    ) -> Result<Self, WorkerError> {
        let staging_root = staging_root.into();
        std::fs::create_dir_all(&staging_root)?;
        let clusters = ClusterMap::open(staging_root.join(CLUSTERS_FILE))?;
        Ok(Worker {
            staging_root,
            files,
            executor,
            clusters: Mutex::new(clusters),
            reserved: Mutex::new(HashSet::new()),
        })
    }

    /// Highest cluster id recorded under `staging_root`, for seeding a new
    /// executor after a restart.
    pub fn last_cluster_id(staging_root: &Path) -> Result<ClusterId, WorkerError> {
        Ok(ClusterMap::open(staging_root.join(CLUSTERS_FILE))?.max_cluster_id())
    }

    pub fn staging_root(&self) -> &Path {
        &self.staging_root
    }

    pub fn files(&self) -> &FileService {
        &self.files
    }

    pub fn executor(&self) -> &Arc<dyn Executor> {
        &self.executor
    }

    pub fn has_job(&self, job_id: &str) -> bool {
        self.clusters.lock().contains(job_id)
    }

    pub fn job_ids(&self) -> Vec<String> {
        self.clusters.lock().job_ids().map(str::to_owned).collect()
    }

    /// Claims `job_id` for an accept in progress.
    pub fn reserve(&self, job_id: &str) -> Result<Reservation<'_>, WorkerError> {
        if !is_plain_name(job_id) {
            return Err(WorkerError::InvalidRequest(format!(
                "bad job id `{job_id}`"
            )));
        }
        let mut reserved = self.reserved.lock();
        if self.has_job(job_id)
            || reserved.contains(job_id)
            || self.staging_root.join(job_id).exists()
        {
            return Err(WorkerError::DuplicateJob(job_id.to_owned()));
        }
        reserved.insert(job_id.to_owned());
        Ok(Reservation {
            worker: self,
            job_id: job_id.to_owned(),
            committed: false,
        })
    }

    pub fn prepare(&self, request: JobRequest) -> Result<PreparedJob, WorkerError> {
        request.validate()?;
        let text = std::str::from_utf8(&request.submit_file)
            .map_err(|_| WorkerError::SubmitParse("submit file is not UTF-8".into()))?;
        let description = SubmitDescription::parse(text)?;
        let executable_name = description.executable_name(&request.job_name).to_owned();
        if !is_plain_name(&executable_name) || executable_name == request.submit_file_name {
            return Err(WorkerError::InvalidRequest(format!(
                "bad executable name `{executable_name}`"
            )));
        }
        for input in &request.input_file_names {
            if input_base_name(input) == executable_name {
                return Err(WorkerError::InvalidRequest(format!(
                    "input `{input}` collides with the executable"
                )));
            }
        }
        Ok(PreparedJob {
            request,
            description,
            executable_name,
        })
    }

    /// Resolves the request's inputs in this node's publishing area.
    pub fn local_inputs(&self, request: &JobRequest) -> Result<Vec<PathBuf>, WorkerError> {
        request
            .input_file_names
            .iter()
            .map(|name| {
                let p = self
                    .files
                    .resolve(name)
                    .map_err(|e| WorkerError::InputFetch(format!("{name}: {e}")))?;
                if p.is_file() {
                    Ok(p)
                } else {
                    Err(WorkerError::InputFetch(format!(
                        "{name}: not a regular file"
                    )))
                }
            })
            .collect()
    }

    /// Stages the job from `inputs` (one local file per input), starts every
    /// run and records the clusters. On error the staging is removed.
    pub fn accept(
        &self,
        reservation: Reservation<'_>,
        job: &PreparedJob,
        inputs: &[PathBuf],
    ) -> Result<Vec<ClusterId>, WorkerError> {
        let job_id = reservation.job_id().to_owned();
        let layout = stage_job(
            &self.staging_root,
            &job_id,
            &job.request,
            &job.executable_name,
            inputs,
        )?;
        let clusters = self.execute(&layout, &job.request.submit_file_name)?;
        self.clusters.lock().insert(&job_id, clusters.clone())?;
        reservation.commit();
        Ok(clusters)
    }

    /// Submits one run per run directory, parsing the staged submit file.
    /// If any submit fails, runs already started are killed.
    pub fn execute(
        &self,
        layout: &StagingLayout,
        submit_file_name: &str,
    ) -> Result<Vec<ClusterId>, WorkerError> {
        let mut clusters = Vec::new();
        let result = (|| {
            for (i, dir) in layout.runs.iter().enumerate() {
                let text = std::fs::read_to_string(dir.join(submit_file_name))
                    .map_err(|e| WorkerError::SubmitParse(e.to_string()))?;
                let desc = SubmitDescription::parse(&text)?;
                let input = layout.manifest.runs[i]
                    .keys()
                    .find(|n| {
                        **n != layout.manifest.executable_name
                            && **n != layout.manifest.submit_file_name
                    })
                    .cloned()
                    .unwrap_or_default();
                let spec = RunSpec {
                    dir: dir.clone(),
                    program: dir.join(&layout.manifest.executable_name),
                    args: desc.expanded_arguments(&input),
                    stdout: desc.output.clone(),
                    stderr: desc.error.clone(),
                };
                clusters.push(self.executor.submit(spec)?);
            }
            Ok(())
        })();
        match result {
            Ok(()) => Ok(clusters),
            Err(e) => {
                for c in clusters {
                    let _ = self.executor.kill(c);
                }
                Err(e)
            }
        }
    }

    fn clusters_of(&self, job_id: &str) -> Result<Vec<ClusterId>, WorkerError> {
        self.clusters
            .lock()
            .get(job_id)
            .map(<[_]>::to_vec)
            .ok_or_else(|| WorkerError::UnknownJob(job_id.to_owned()))
    }

    pub fn status(&self, job_id: &str) -> Result<JobStatus, WorkerError> {
        let clusters = self.clusters_of(job_id)?;
        Ok(JobStatus::new(job_id, self.executor.query(&clusters)))
    }

    pub fn kill(&self, job_id: &str) -> Result<(), WorkerError> {
        for c in self.clusters_of(job_id)? {
            self.executor.kill(c)?;
        }
        Ok(())
    }

    /// Per run, every file that was not staged or whose content changed.
    pub fn outputs(&self, job_id: &str) -> Result<Vec<Vec<OutputFile>>, WorkerError> {
        self.clusters_of(job_id)?;
        let layout = StagingLayout::load(&self.staging_root, job_id)?;
        let mut all = Vec::new();
        for (dir, staged) in layout.runs.iter().zip(&layout.manifest.runs) {
            let mut outs = Vec::new();
            for entry in walkdir::WalkDir::new(dir).min_depth(1).sort_by_file_name() {
                let entry = entry.map_err(|e| WorkerError::Io(e.into()))?;
                if !entry.file_type().is_file() {
                    continue;
                }
                let name = entry
                    .path()
                    .strip_prefix(dir)
                    .expect("under run dir")
                    .to_string_lossy()
                    .into_owned();
                let md5 = files::md5_file(entry.path())?;
                if staged.get(&name) == Some(&md5) {
                    continue;
                }
                let size = entry
                    .metadata()
                    .map_err(|e| WorkerError::Io(e.into()))?
                    .len();
                outs.push(OutputFile { name, size, md5 });
            }
            all.push(outs);
        }
        Ok(all)
    }

    pub fn fetch(
        &self,
        job_id: &str,
        run: i32,
        name: &str,
        offset: i64,
        length: i64,
    ) -> Result<Vec<u8>, WorkerError> {
        let clusters = self.clusters_of(job_id)?;
        if run < 0 || run as usize >= clusters.len() {
            return Err(WorkerError::NotFound(format!("{job_id} has no run {run}")));
        }
        let dir = self
            .staging_root
            .join(job_id)
            .join(run_dir_name(run as usize));
        if name.starts_with('/') {
            return Err(WorkerError::OutsideRoot(name.to_owned()));
        }
        let path = files::resolve_within(&dir.canonicalize()?, name)?;
        if !path.is_file() {
            return Err(WorkerError::NotFound(name.to_owned()));
        }
        files::read_range(&path, offset, length)
    }

    /// Kills the job, deletes its staging directory and forgets it.
    pub fn purge(&self, job_id: &str) -> Result<(), WorkerError> {
        self.kill(job_id)?;
        match std::fs::remove_dir_all(self.staging_root.join(job_id)) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        self.clusters.lock().remove(job_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::{Duration, Instant};

    struct Fixture {
        _dir: tempfile::TempDir,
        worker: Worker,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let files = FileService::open(dir.path().join("pub")).unwrap();
        std::fs::write(files.root().join("a.dat"), b"alpha\n").unwrap();
        std::fs::write(files.root().join("b.dat"), b"beta\n").unwrap();
        let ex: Arc<dyn Executor> = Arc::new(LocalProcessExecutor::new(4, 0));
        let worker = Worker::open(dir.path().join("staging"), files, ex).unwrap();
        Fixture { _dir: dir, worker }
    }

    fn request(script: &str, inputs: &[&str]) -> JobRequest {
        JobRequest {
            job_name: "count".into(),
            executable: format!("#!/bin/sh\n{script}\n").into_bytes(),
            submit_file: b"executable=count.sh\narguments=$(input)\noutput=out.txt\nqueue\n"
                .to_vec(),
            submit_file_name: "count.sub".into(),
            input_file_names: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn accept(w: &Worker, id: &str, req: JobRequest) -> Result<Vec<ClusterId>, WorkerError> {
        let r = w.reserve(id)?;
        let job = w.prepare(req)?;
        let inputs = w.local_inputs(&job.request)?;
        w.accept(r, &job, &inputs)
    }

    async fn wait_for(w: &Worker, id: &str, want: RunState) -> JobStatus {
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            let s = w.status(id).unwrap();
            if s.aggregate == want || Instant::now() > deadline {
                return s;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn end_to_end_outputs() {
        let f = fixture();
        let w = &f.worker;
        let ids = accept(w, "J-w-1", request("wc -c < \"$1\"", &["/a.dat", "b.dat"])).unwrap();
        assert_eq!(ids.len(), 2);
        let s = wait_for(w, "J-w-1", RunState::Completed).await;
        assert_eq!(s.runs, [RunState::Completed, RunState::Completed]);
        let outs = w.outputs("J-w-1").unwrap();
        assert_eq!(
            outs[0],
            [OutputFile {
                name: "out.txt".into(),
                size: 2,
                md5: files::md5_bytes(b"6\n")
            }]
        );
        assert_eq!(outs[1][0].md5, files::md5_bytes(b"5\n"));
        let full = w.fetch("J-w-1", 0, "out.txt", 0, 0).unwrap();
        assert_eq!(files::md5_bytes(&full), outs[0][0].md5);
        assert!(matches!(
            w.fetch("J-w-1", 0, "out.txt", 3, 0),
            Err(WorkerError::Range(_))
        ));
        assert!(matches!(
            w.fetch("J-w-1", 2, "out.txt", 0, 0),
            Err(WorkerError::NotFound(_))
        ));
        assert!(matches!(
            w.fetch("J-w-1", 0, "nope", 0, 0),
            Err(WorkerError::NotFound(_))
        ));
        for bad in ["../run-1/out.txt", "/etc/passwd", "../../clusters.tsv"] {
            assert!(
                matches!(
                    w.fetch("J-w-1", 0, bad, 0, 0),
                    Err(WorkerError::OutsideRoot(_))
                ),
                "{bad}"
            );
        }
        // kill after completion changes nothing
        w.kill("J-w-1").unwrap();
        assert_eq!(w.status("J-w-1").unwrap().aggregate, RunState::Completed);
        w.purge("J-w-1").unwrap();
        assert!(matches!(w.status("J-w-1"), Err(WorkerError::UnknownJob(_))));
        assert!(!w.staging_root().join("J-w-1").exists());
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn kill_sleeping_runs() {
        let f = fixture();
        let w = &f.worker;
        accept(w, "J-w-2", request("sleep 30", &["a.dat", "b.dat"])).unwrap();
        wait_for(w, "J-w-2", RunState::Running).await;
        let t = Instant::now();
        w.kill("J-w-2").unwrap();
        w.kill("J-w-2").unwrap();
        let s = wait_for(w, "J-w-2", RunState::Killed).await;
        assert_eq!(s.runs, [RunState::Killed, RunState::Killed]);
        assert!(t.elapsed() < Duration::from_secs(2));
        assert!(w
            .outputs("J-w-2")
            .unwrap()
            .iter()
            .all(|o| o.iter().all(|f| f.name == "out.txt")));
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn accept_errors_leave_no_trace() {
        let f = fixture();
        let w = &f.worker;
        accept(w, "J-w-3", request("true", &["a.dat"])).unwrap();
        let before = std::fs::read_dir(w.staging_root().join("J-w-3/run-0"))
            .unwrap()
            .count();
        let dup = accept(w, "J-w-3", request("true", &["b.dat"])).unwrap_err();
        assert!(matches!(dup, WorkerError::DuplicateJob(_)));
        let after = std::fs::read_dir(w.staging_root().join("J-w-3/run-0"))
            .unwrap()
            .count();
        assert_eq!(before, after);

        let missing = accept(w, "J-w-4", request("true", &["a.dat", "missing.dat"])).unwrap_err();
        assert!(matches!(missing, WorkerError::InputFetch(_)));
        assert!(!w.staging_root().join("J-w-4").exists());
        assert!(matches!(
            accept(w, "J-w-5", request("true", &["../secret"])),
            Err(WorkerError::InvalidRequest(_))
        ));
        let mut noqueue = request("true", &["a.dat"]);
        noqueue.submit_file = b"executable=count.sh\n".to_vec();
        assert!(matches!(
            accept(w, "J-w-6", noqueue),
            Err(WorkerError::SubmitParse(_))
        ));
        // ids freed by failed accepts can be reused
        accept(w, "J-w-4", request("true", &["a.dat"])).unwrap();
        let names: HashSet<_> = std::fs::read_dir(w.staging_root())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(
            names,
            HashSet::from(["J-w-3".into(), "J-w-4".into(), CLUSTERS_FILE.into()])
        );
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn cluster_map_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let files = FileService::open(dir.path().join("pub")).unwrap();
        std::fs::write(files.root().join("a.dat"), b"x").unwrap();
        let staging = dir.path().join("staging");
        let first = {
            let w = Worker::open(
                &staging,
                files.clone(),
                Arc::new(LocalProcessExecutor::new(1, 0)),
            )
            .unwrap();
            accept(&w, "J-w-7", request("true", &["a.dat", "a.dat"])).unwrap()
        };
        let last = Worker::last_cluster_id(&staging).unwrap();
        assert_eq!(last, *first.iter().max().unwrap());
        let w = Worker::open(
            &staging,
            files,
            Arc::new(LocalProcessExecutor::new(1, last)),
        )
        .unwrap();
        assert!(w.has_job("J-w-7"));
        assert_eq!(
            w.status("J-w-7").unwrap().runs,
            [RunState::Unknown, RunState::Unknown]
        );
        let second = accept(&w, "J-w-8", request("true", &["a.dat"])).unwrap();
        assert!(second.iter().all(|c| !first.contains(c)));
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn non_executable_binary_fails_at_run_time() {
        let f = fixture();
        let w = &f.worker;
        let mut req = request("", &["a.dat"]);
        req.executable = vec![0x7f, 0, 1, 2, 3];
        accept(w, "J-w-9", req).unwrap();
        assert_eq!(
            wait_for(w, "J-w-9", RunState::Failed).await.aggregate,
            RunState::Failed
        );
    }
}
