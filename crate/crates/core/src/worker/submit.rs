//! The submit-file subset understood by the bundled executor.
//!
//! ```text
//! # comment
//! executable = count.sh
//! arguments  = $(input) --verbose
//! output     = out.txt
//! error      = err.txt
//! queue
//! ```
//!
//! `$(input)` in `arguments` expands to the run's input file name.

use super::WorkerError;

pub const INPUT_MACRO: &str = "$(input)";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubmitDescription {
    pub executable: Option<String>,
    pub arguments: Vec<String>,
    pub output: Option<String>,
    pub error: Option<String>,
}

impl SubmitDescription {
    pub fn parse(text: &str) -> Result<Self, WorkerError> {
        let err =
            |line: usize, msg: String| WorkerError::SubmitParse(format!("line {line}: {msg}"));
        let mut desc = SubmitDescription::default();
        let mut seen_arguments = false;
        let mut queued = false;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if queued {
                return Err(err(n, "content after `queue`".into()));
            }
            if line == "queue" {
                queued = true;
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(n, format!("expected `key = value`, found `{line}`")));
            };
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim();
            let slot = match key.as_str() {
                "executable" => &mut desc.executable,
                "output" => &mut desc.output,
                "error" => &mut desc.error,
                "arguments" => {
                    if seen_arguments {
                        return Err(err(n, "duplicate key `arguments`".into()));
                    }
                    seen_arguments = true;
                    desc.arguments = value.split_whitespace().map(str::to_owned).collect();
                    continue;
                }
                other => return Err(err(n, format!("unsupported key `{other}`"))),
            };
            if slot.is_some() {
                return Err(err(n, format!("duplicate key `{key}`")));
            }
            if value.is_empty() {
                return Err(err(n, format!("empty value for `{key}`")));
            }
            if key != "executable" && !super::is_plain_name(value) {
                return Err(err(
                    n,
                    format!("`{key}` must be a plain file name, got `{value}`"),
                ));
            }
            *slot = Some(value.to_owned());
        }
        if !queued {
            return Err(WorkerError::SubmitParse("missing `queue` line".into()));
        }
        Ok(desc)
    }

    /// Name under which the executable is staged: the base name of the
    /// `executable` key, or `fallback` when the key is absent.
    pub fn executable_name<'a>(&'a self, fallback: &'a str) -> &'a str {
        match &self.executable {
            Some(e) => e.rsplit('/').next().unwrap_or(e),
            None => fallback,
        }
    }

    pub fn expanded_arguments(&self, input_name: &str) -> Vec<String> {
        self.arguments
            .iter()
            .map(|a| a.replace(INPUT_MACRO, input_name))
            .collect()
    }
}
