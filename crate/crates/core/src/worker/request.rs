use crate::rpc::{RpcValue, ValueError};

use super::{is_plain_name, WorkerError};

/// The five parameters of a job submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRequest {
    pub job_name: String,
    pub executable: Vec<u8>,
    pub submit_file: Vec<u8>,
    pub submit_file_name: String,
    /// Paths relative to the publishing area of the node that received the
    /// submission. A leading `/` is ignored.
    pub input_file_names: Vec<String>,
}

impl JobRequest {
    pub fn validate(&self) -> Result<(), WorkerError> {
        let bad = |m: String| Err(WorkerError::InvalidRequest(m));
        if !is_plain_name(&self.job_name) {
            return bad(format!("job name `{}` must be a plain name", self.job_name));
        }
        if !is_plain_name(&self.submit_file_name) {
            return bad(format!(
                "submit file name `{}` must be a plain name",
                self.submit_file_name
            ));
        }
        if self.executable.is_empty() {
            return bad("executable is empty".into());
        }
        if self.input_file_names.is_empty() {
            return bad("at least one input file is required".into());
        }
        for input in &self.input_file_names {
            let name = input_base_name(input);
            if !is_plain_name(name) || input.split('/').any(|c| c == "..") {
                return bad(format!("bad input path `{input}`"));
            }
            if name == self.submit_file_name {
                return bad(format!(
                    "input `{input}` collides with the submit file name"
                ));
            }
        }
        Ok(())
    }

    pub fn to_rpc(&self) -> RpcValue {
        RpcValue::record([
            ("job_name", RpcValue::from(self.job_name.as_str())),
            ("executable", RpcValue::Base64(self.executable.clone())),
            ("submit_file", RpcValue::Base64(self.submit_file.clone())),
            (
                "submit_file_name",
                RpcValue::from(self.submit_file_name.as_str()),
            ),
            (
                "input_file_names",
                RpcValue::Array(
                    self.input_file_names
                        .iter()
                        .map(|s| RpcValue::from(s.as_str()))
                        .collect(),
                ),
            ),
        ])
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        Ok(JobRequest {
            job_name: v.member("job_name")?.as_str()?.to_owned(),
            executable: v.member("executable")?.as_bytes()?.to_vec(),
            submit_file: v.member("submit_file")?.as_bytes()?.to_vec(),
            submit_file_name: v.member("submit_file_name")?.as_str()?.to_owned(),
            input_file_names: v.member("input_file_names")?.string_list()?,
        })
    }
}

/// Name under which an input is staged in its run directory.
pub fn input_base_name(path: &str) -> &str {
    path.trim_end_matches('/')
        .rsplit('/')
        .next()
        .unwrap_or(path)
}
