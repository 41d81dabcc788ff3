//! On-disk job layout:
//!
//! ```text
//! <root>/<job_id>/manifest.json
//! <root>/<job_id>/run-0/{executable, submit file, first input}
//! <root>/<job_id>/run-1/{executable, submit file, second input}
//! ```

use std::collections::BTreeMap;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::files::{md5_bytes, md5_file};
use super::request::{input_base_name, JobRequest};
use super::WorkerError;

pub const MANIFEST: &str = "manifest.json";

pub fn run_dir_name(index: usize) -> String {
    format!("run-{index}")
}

/// What was placed in the job directory before execution; used to tell
/// outputs apart from staged files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub job_name: String,
    pub executable_name: String,
    pub submit_file_name: String,
    /// Per run: staged file name → md5.
    pub runs: Vec<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagingLayout {
    pub root: PathBuf,
    pub job_dir: PathBuf,
    pub runs: Vec<PathBuf>,
    pub manifest: Manifest,
}

impl StagingLayout {
    pub fn load(root: &Path, job_id: &str) -> Result<Self, WorkerError> {
        let job_dir = root.join(job_id);
        let text = std::fs::read(job_dir.join(MANIFEST))?;
        let manifest: Manifest = serde_json::from_slice(&text)
            .map_err(|e| WorkerError::Corrupt(format!("{job_id} manifest: {e}")))?;
        let runs = (0..manifest.runs.len())
            .map(|i| job_dir.join(run_dir_name(i)))
            .collect();
        Ok(StagingLayout {
            root: root.to_path_buf(),
            job_dir,
            runs,
            manifest,
        })
    }
}

/// Builds the job directory. `inputs[i]` is the local file staged into run
/// `i` under the base name of `request.input_file_names[i]`. On error
/// nothing is left behind; an existing job directory is never touched.
pub fn stage_job(
    root: &Path,
    job_id: &str,
    request: &JobRequest,
    executable_name: &str,
    inputs: &[PathBuf],
) -> Result<StagingLayout, WorkerError> {
    assert_eq!(inputs.len(), request.input_file_names.len());
    std::fs::create_dir_all(root)?;
    let job_dir = root.join(job_id);
    match std::fs::create_dir(&job_dir) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            return Err(WorkerError::DuplicateJob(job_id.to_owned()))
        }
        Err(e) => return Err(e.into()),
    }
    let built = (|| {
        let exe_md5 = md5_bytes(&request.executable);
        let submit_md5 = md5_bytes(&request.submit_file);
        let mut runs = Vec::new();
        let mut staged = Vec::new();
        for (i, (src, name)) in inputs.iter().zip(&request.input_file_names).enumerate() {
            let dir = job_dir.join(run_dir_name(i));
            std::fs::create_dir(&dir)?;
            let exe = dir.join(executable_name);
            std::fs::write(&exe, &request.executable)?;
            std::fs::set_permissions(&exe, std::fs::Permissions::from_mode(0o755))?;
            std::fs::write(dir.join(&request.submit_file_name), &request.submit_file)?;
            let input_name = input_base_name(name);
            std::fs::copy(src, dir.join(input_name))?;
            let mut files = BTreeMap::new();
            files.insert(executable_name.to_owned(), exe_md5.clone());
            files.insert(request.submit_file_name.clone(), submit_md5.clone());
            files.insert(input_name.to_owned(), md5_file(&dir.join(input_name))?);
            staged.push(files);
            runs.push(dir);
        }
        let manifest = Manifest {
            job_name: request.job_name.clone(),
            executable_name: executable_name.to_owned(),
            submit_file_name: request.submit_file_name.clone(),
            runs: staged,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        std::fs::write(job_dir.join(MANIFEST), json)?;
        Ok::<_, WorkerError>(StagingLayout {
            root: root.to_path_buf(),
            job_dir: job_dir.clone(),
            runs,
            manifest,
        })
    })();
    if built.is_err() {
        let _ = std::fs::remove_dir_all(&job_dir);
    }
    built
}
