//! The `gridlet` command-line client.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use gridlet_core::worker::files::md5_bytes;
use gridlet_core::worker::{JobRequest, JobStatus};
use serde_json::{json, Value};

use crate::rpc::{Auth, ClientError, RpcClient};
use crate::transfer::{self, Journal, TransferError, DEFAULT_CHUNK_BYTES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_REMOTE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gridlet",
    version,
    about = "Submit, watch and retrieve grid jobs",
    arg_required_else_help = true
)]
struct Cli {
    /// Broker URL; a comma-separated list is tried in order.
    #[arg(
        long,
        env = "GRIDLET_BROKER",
        global = true,
        default_value = "http://127.0.0.1:7070"
    )]
    broker: String,
    /// Credential file (JSON with dn, vos and secret).
    #[arg(long, env = "GRIDLET_CRED", global = true)]
    cred: Option<PathBuf>,
    /// Session token from `gridlet login`, used when no credential is given.
    #[arg(long, env = "GRIDLET_SESSION", global = true, hide_env_values = true)]
    session: Option<String>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Download chunk size in KiB.
    #[arg(long, global = true, default_value_t = DEFAULT_CHUNK_BYTES / 1024)]
    chunk_kib: u64,
    /// Status poll interval for `watch`, in seconds.
    #[arg(long, global = true, default_value_t = 2.0)]
    poll_s: f64,
    /// Transfer journal file.
    #[arg(long, env = "GRIDLET_JOURNAL", global = true)]
    journal: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exchange the credential for a session token.
    Login,
    /// List files in the publishing area.
    Ls {
        #[arg(default_value = "/")]
        path: String,
        #[arg(long, default_value = "*")]
        pattern: String,
    },
    /// Search file contents with a regular expression.
    Grep {
        path: String,
        regex: String,
    },
    /// Download a file, resuming an interrupted transfer.
    Get {
        remote: String,
        local: Option<PathBuf>,
    },
    /// Print the md5 of a remote file.
    Md5 {
        path: String,
    },
    /// Submit a job over one or more input files.
    Submit {
        #[arg(long)]
        name: String,
        #[arg(long)]
        exe: PathBuf,
        #[arg(long)]
        submit: PathBuf,
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
    },
    Status {
        job_id: String,
    },
    /// Poll a job until it reaches a terminal state.
    Watch {
        job_id: String,
    },
    Kill {
        job_id: String,
    },
    /// List the output files of each run.
    Outputs {
        job_id: String,
    },
    /// Download an output file of one run.
    Fetch {
        job_id: String,
        run: u32,
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show the peer registry.
    Peers,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Client(#[from] ClientError),
    #[error("{0}")]
    Transfer(#[from] TransferError),
    #[error("{0}")]
    Local(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Client(ClientError::Transport(_)) => EXIT_TRANSPORT,
            CliError::Transfer(TransferError::Server(ClientError::Transport(_))) => EXIT_TRANSPORT,
            _ => EXIT_REMOTE,
        }
    }
}

fn local(e: impl std::fmt::Display, what: &Path) -> CliError {
    CliError::Local(format!("{}: {e}", what.display()))
}

/// Runs one invocation and returns its exit code.
pub async fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, out).await {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if cli.json {
                let body = match &e {
                    CliError::Client(ClientError::Fault(f)) => {
                        json!({"error": f.message, "fault_code": f.code})
                    }
                    CliError::Transfer(TransferError::Server(ClientError::Fault(f))) => {
                        json!({"error": f.message, "fault_code": f.code})
                    }
                    other => json!({"error": other.to_string(), "fault_code": null}),
                };
                let _ = writeln!(err, "{body}");
            } else {
                let _ = writeln!(err, "gridlet: {e}");
            }
            e.exit_code()
        }
    }
}

fn client(cli: &Cli) -> Result<RpcClient, CliError> {
    let auth = match (&cli.cred, &cli.session) {
        (Some(path), _) => Auth::Credential(std::fs::read(path).map_err(|e| local(e, path))?),
        (None, Some(token)) => Auth::Session(token.clone()),
        (None, None) => Auth::None,
    };
    Ok(RpcClient::new(&cli.broker).with_auth(auth))
}

fn journal_path(cli: &Cli) -> PathBuf {
    cli.journal.clone().unwrap_or_else(|| {
        let home = std::env::var_os("HOME")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));
        home.join(".gridlet").join("journal")
    })
}

fn emit(
    out: &mut dyn Write,
    json_mode: bool,
    value: &Value,
    text: impl FnOnce() -> String,
) -> Result<(), CliError> {
    let s = if json_mode {
        serde_json::to_string_pretty(value).expect("json")
    } else {
        text()
    };
    writeln!(out, "{s}").map_err(|e| CliError::Local(e.to_string()))
}

fn status_json(s: &JobStatus) -> Value {
    json!({
        "job_id": s.job_id,
        "aggregate": s.aggregate.as_str(),
        "runs": s.runs.iter().map(|r| r.as_str()).collect::<Vec<_>>(),
    })
}

fn status_text(s: &JobStatus) -> String {
    let runs: Vec<_> = s
        .runs
        .iter()
        .enumerate()
        .map(|(i, r)| format!("run-{i}={r}"))
        .collect();
    format!("{} {} ({})", s.job_id, s.aggregate, runs.join(" "))
}

async fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let rpc = client(cli)?;
    let j = cli.json;
    match &cli.command {
        Command::Login => {
            let Some(path) = &cli.cred else {
                return Err(CliError::Local("login needs --cred".into()));
            };
            let cred = std::fs::read(path).map_err(|e| local(e, path))?;
            let token = RpcClient::new(&cli.broker).login(&cred).await?;
            emit(out, j, &json!({ "session": token }), || token.clone())
        }
        Command::Ls { path, pattern } => {
            let entries = rpc.file_ls(path, pattern).await?;
            let v: Vec<_> = entries
                .iter()
                .map(|e| json!({"name": e.name, "size": e.size, "is_dir": e.is_dir}))
                .collect();
            emit(out, j, &Value::Array(v), || {
                entries
                    .iter()
                    .map(|e| {
                        if e.is_dir {
                            format!("{:>12}  {}/", "-", e.name)
                        } else {
                            format!("{:>12}  {}", e.size, e.name)
                        }
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            })
        }
        Command::Grep { path, regex } => {
            let hits = rpc.file_grep(path, regex).await?;
            let v: Vec<_> = hits
                .iter()
                .map(|m| json!({"path": m.path, "line_number": m.line_number, "line": m.line}))
                .collect();
            emit(out, j, &Value::Array(v), || {
                hits.iter()
                    .map(|m| format!("{}:{}:{}", m.path, m.line_number, m.line))
                    .collect::<Vec<_>>()
                    .join("\n")
            })
        }
        Command::Md5 { path } => {
            let md5 = rpc.file_md5(path).await?;
            emit(out, j, &json!({"path": path, "md5": md5}), || {
                format!("{md5}  {path}")
            })
        }
        Command::Get {
            remote,
            local: dest,
        } => {
            let dest = dest.clone().unwrap_or_else(|| {
                PathBuf::from(
                    remote
                        .trim_end_matches('/')
                        .rsplit('/')
                        .next()
                        .unwrap_or("download"),
                )
            });
            let jpath = journal_path(cli);
            if let Some(parent) = jpath.parent() {
                std::fs::create_dir_all(parent).map_err(|e| local(e, parent))?;
            }
            let mut journal = Journal::load(&jpath)?;
            let chunk = cli.chunk_kib.max(1) * 1024;
            let report = transfer::download(&rpc, &mut journal, remote, &dest, chunk).await?;
            let md5 = gridlet_core::worker::files::md5_file(&dest).map_err(|e| local(e, &dest))?;
            let v = json!({
                "remote": remote,
                "local": dest.display().to_string(),
                "size": report.size,
                "md5": md5,
                "resumed_from": report.resumed_from,
                "bytes_fetched": report.bytes_fetched,
            });
            emit(out, j, &v, || {
                let resumed = if report.resumed_from > 0 {
                    format!(", resumed at {}", report.resumed_from)
                } else {
                    String::new()
                };
                format!(
                    "{} -> {} ({} bytes{resumed}, md5 {md5})",
                    remote,
                    dest.display(),
                    report.size
                )
            })
        }
        Command::Submit {
            name,
            exe,
            submit,
            inputs,
        } => {
            let executable = std::fs::read(exe).map_err(|e| local(e, exe))?;
            let submit_file = std::fs::read(submit).map_err(|e| local(e, submit))?;
            let submit_file_name = submit
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::Local(format!("{}: not a file name", submit.display())))?;
            let request = JobRequest {
                job_name: name.clone(),
                executable,
                submit_file,
                submit_file_name,
                input_file_names: inputs.clone(),
            };
            let id = rpc.job_submit(&request).await?;
            emit(out, j, &json!({ "job_id": id }), || id.clone())
        }
        Command::Status { job_id } => {
            let s = rpc.job_status(job_id).await?;
            emit(out, j, &status_json(&s), || status_text(&s))
        }
        Command::Watch { job_id } => {
            let poll = Duration::from_secs_f64(cli.poll_s.max(0.05));
            let mut last = None;
            loop {
                let s = rpc.job_status(job_id).await?;
                if !j && last.as_ref() != Some(&s) {
                    writeln!(out, "{}", status_text(&s))
                        .map_err(|e| CliError::Local(e.to_string()))?;
                }
                if s.aggregate.is_terminal() {
                    if j {
                        emit(out, j, &status_json(&s), String::new)?;
                    }
                    return Ok(());
                }
                last = Some(s);
                tokio::time::sleep(poll).await;
            }
        }
        Command::Kill { job_id } => {
            rpc.job_kill(job_id).await?;
            emit(out, j, &json!({"job_id": job_id, "killed": true}), || {
                format!("{job_id} killed")
            })
        }
        Command::Outputs { job_id } => {
            let runs = rpc.job_outputs(job_id).await?;
            let v: Vec<Vec<Value>> = runs
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|o| json!({"name": o.name, "size": o.size, "md5": o.md5}))
                        .collect()
                })
                .collect();
            emit(out, j, &json!({"job_id": job_id, "runs": v}), || {
                let mut lines = Vec::new();
                for (i, r) in runs.iter().enumerate() {
                    for o in r {
                        lines.push(format!("run-{i}  {:>10}  {}  {}", o.size, o.md5, o.name));
                    }
                }
                lines.join("\n")
            })
        }
        Command::Fetch {
            job_id,
            run,
            name,
            out: dest,
        } => {
            let dest = dest
                .clone()
                .unwrap_or_else(|| PathBuf::from(name.rsplit('/').next().unwrap_or(name)));
            let listed = rpc.job_outputs(job_id).await?;
            let size = listed
                .get(*run as usize)
                .and_then(|r| r.iter().find(|o| o.name == *name))
                .map(|o| o.size)
                .ok_or_else(|| {
                    CliError::Local(format!("{job_id} run {run} has no output `{name}`"))
                })?;
            let chunk = cli.chunk_kib.max(1) * 1024;
            let mut bytes = Vec::with_capacity(size as usize);
            while (bytes.len() as u64) < size {
                let want = chunk.min(size - bytes.len() as u64);
                bytes.extend(
                    rpc.job_fetch(job_id, *run, name, bytes.len() as u64, want)
                        .await?,
                );
            }
            std::fs::write(&dest, &bytes).map_err(|e| local(e, &dest))?;
            let md5 = md5_bytes(&bytes);
            let v = json!({
                "job_id": job_id,
                "run": run,
                "name": name,
                "local": dest.display().to_string(),
                "size": size,
                "md5": md5,
            });
            emit(out, j, &v, || {
                format!("{} ({size} bytes, md5 {md5})", dest.display())
            })
        }
        Command::Peers => {
            let peers = rpc.peer_list().await?;
            let v: Vec<_> = peers
                .iter()
                .map(|p| {
                    json!({
                        "peer_id": p.peer_id,
                        "url": p.url,
                        "coefficient": p.last_report.as_ref().map(|r| r.coefficient),
                        "timestamp": p.last_report.as_ref().map(|r| r.timestamp),
                    })
                })
                .collect();
            emit(out, j, &Value::Array(v), || {
                peers
                    .iter()
                    .map(|p| match &p.last_report {
                        Some(r) => format!(
                            "{:<12} {:<28} {:>12.3} @{}",
                            p.peer_id, p.url, r.coefficient, r.timestamp
                        ),
                        None => format!("{:<12} {:<28} {:>12}", p.peer_id, p.url, "-"),
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            })
        }
    }
}
