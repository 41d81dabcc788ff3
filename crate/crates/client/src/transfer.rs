//! Resumable chunked downloads with an on-disk checkpoint journal.
//!
//! A download writes into `<local>.gridlet-part` and records, after every
//! chunk, how many bytes of it are good. The journal holds one line per
//! unfinished transfer:
//!
//! ```text
//! v1 <urlencoded remote> <urlencoded temp> <bytes> <chunk> <md5|->
//! ```
//!
//! Once all bytes are in, the temp file is checked against the server's md5
//! and renamed into place, and the line is dropped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use gridlet_core::worker::files::md5_file;
use gridlet_core::write_atomic;
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

use crate::rpc::{ClientError, RpcClient};

pub const DEFAULT_CHUNK_BYTES: u64 = 64 * 1024;
pub const TEMP_SUFFIX: &str = ".gridlet-part";
const VERSION: &str = "v1";

const PATH_SET: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'/')
    .remove(b'.')
    .remove(b'-')
    .remove(b'_')
    .remove(b'~');

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("{path}:{line}: corrupt journal: {reason}")]
    CorruptJournal {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("checksum mismatch for {remote}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        remote: String,
        expected: String,
        actual: String,
    },
    #[error("no resumable transfer for {0}")]
    EntryMissing(String),
    #[error("{remote} is now {size} bytes but {completed} were already transferred")]
    RemoteChanged {
        remote: String,
        size: u64,
        completed: u64,
    },
    #[error("server: {0}")]
    Server(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub remote_path: String,
    pub temp_path: PathBuf,
    pub bytes_completed: u64,
    pub chunk_bytes: u64,
    pub expected_md5: Option<String>,
}

impl Checkpoint {
    /// The final destination: the temp path without its suffix.
    pub fn local_path(&self) -> PathBuf {
        let s = self.temp_path.to_string_lossy();
        PathBuf::from(s.strip_suffix(TEMP_SUFFIX).unwrap_or(&s).to_owned())
    }
}

pub fn temp_path_for(local: &Path) -> PathBuf {
    let mut s = local.as_os_str().to_owned();
    s.push(TEMP_SUFFIX);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Journal {
    path: PathBuf,
    entries: BTreeMap<String, Checkpoint>,
}

impl Journal {
    /// Loads the journal; a missing file is an empty journal.
    pub fn load(path: impl Into<PathBuf>) -> Result<Self, TransferError> {
        let path = path.into();
        let text = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let text = String::from_utf8(text).map_err(|e| TransferError::CorruptJournal {
            path: path.clone(),
            line: 0,
            reason: format!("not UTF-8: {e}"),
        })?;
        let entries =
            parse_journal(&text).map_err(|(line, reason)| TransferError::CorruptJournal {
                path: path.clone(),
                line,
                reason,
            })?;
        Ok(Journal { path, entries })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> impl Iterator<Item = &Checkpoint> {
        self.entries.values()
    }

    pub fn get(&self, remote: &str) -> Option<&Checkpoint> {
        self.entries.get(remote)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn upsert(&mut self, cp: Checkpoint) {
        self.entries.insert(cp.remote_path.clone(), cp);
    }

    pub fn remove(&mut self, remote: &str) -> Option<Checkpoint> {
        self.entries.remove(remote)
    }

    /// Writes the journal through a temp file and a rename.
    pub fn store(&self) -> Result<(), TransferError> {
        write_atomic(&self.path, format_journal(self.entries.values()).as_bytes())?;
        Ok(())
    }
}

pub fn format_journal<'a>(entries: impl IntoIterator<Item = &'a Checkpoint>) -> String {
    let mut out = String::new();
    for cp in entries {
        out.push_str(&format!(
            "{VERSION} {} {} {} {} {}\n",
            utf8_percent_encode(&cp.remote_path, PATH_SET),
            utf8_percent_encode(&cp.temp_path.to_string_lossy(), PATH_SET),
            cp.bytes_completed,
            cp.chunk_bytes,
            cp.expected_md5.as_deref().unwrap_or("-"),
        ));
    }
    out
}

/// Parses journal text; errors carry the 1-based line number.
pub fn parse_journal(text: &str) -> Result<BTreeMap<String, Checkpoint>, (usize, String)> {
    let mut entries = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if fields[0] != VERSION {
            return Err((n, format!("unknown record version `{}`", fields[0])));
        }
        let [_, remote, temp, bytes, chunk, md5] = fields[..] else {
            return Err((n, format!("expected 6 fields, found {}", fields.len())));
        };
        let decode = |s: &str| {
            percent_decode_str(s)
                .decode_utf8()
                .map(|c| c.into_owned())
                .map_err(|e| (n, format!("bad encoding: {e}")))
        };
        let num = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|_| (n, format!("bad {what} `{s}`")))
        };
        let expected_md5 = match md5 {
            "-" => None,
            h if h.len() == 32 && h.bytes().all(|b| b.is_ascii_hexdigit()) => {
                Some(h.to_ascii_lowercase())
            }
            h => return Err((n, format!("bad md5 `{h}`"))),
        };
        let cp = Checkpoint {
            remote_path: decode(remote)?,
            temp_path: PathBuf::from(decode(temp)?),
            bytes_completed: num(bytes, "byte count")?,
            chunk_bytes: num(chunk, "chunk size")?,
            expected_md5,
        };
        if cp.chunk_bytes == 0 {
            return Err((n, "chunk size is zero".into()));
        }
        if entries.insert(cp.remote_path.clone(), cp).is_some() {
            return Err((n, "duplicate entry".into()));
        }
    }
    Ok(entries)
}

/// Where chunks come from. Implemented by [`RpcClient`] via `file.ls`,
/// `file.md5` and `file.read`.
pub trait ChunkSource: Sync {
    fn size(&self, remote: &str) -> impl Future<Output = Result<u64, ClientError>> + Send;
    fn md5(&self, remote: &str) -> impl Future<Output = Result<String, ClientError>> + Send;
    fn read(
        &self,
        remote: &str,
        offset: u64,
        length: u64,
    ) -> impl Future<Output = Result<Vec<u8>, ClientError>> + Send;
}

impl ChunkSource for RpcClient {
    async fn size(&self, remote: &str) -> Result<u64, ClientError> {
        let entries = self.file_ls(remote, "*").await?;
        match entries.as_slice() {
            [e] if !e.is_dir => Ok(e.size),
            _ => Err(ClientError::Protocol(format!(
                "{remote} is not a regular file"
            ))),
        }
    }

    async fn md5(&self, remote: &str) -> Result<String, ClientError> {
        self.file_md5(remote).await
    }

    async fn read(&self, remote: &str, offset: u64, length: u64) -> Result<Vec<u8>, ClientError> {
        self.file_read(remote, offset, length).await
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DownloadReport {
    pub size: u64,
    /// Offset the transfer started from (non-zero when resumed).
    pub resumed_from: u64,
    pub chunks_fetched: u64,
    pub bytes_fetched: u64,
}

/// Downloads `remote` to `local`, continuing a journaled transfer of the
/// same remote if one exists.
pub async fn download<S: ChunkSource>(
    source: &S,
    journal: &mut Journal,
    remote: &str,
    local: &Path,
    chunk_bytes: u64,
) -> Result<DownloadReport, TransferError> {
    if journal.get(remote).is_some() {
        return resume(source, journal, remote).await;
    }
    let chunk_bytes = chunk_bytes.max(1);
    let size = source.size(remote).await?;
    let expected = source.md5(remote).await?;
    let local = std::path::absolute(local)?;
    let temp = temp_path_for(&local);
    File::create(&temp)?;
    journal.upsert(Checkpoint {
        remote_path: remote.to_owned(),
        temp_path: temp,
        bytes_completed: 0,
        chunk_bytes,
        expected_md5: Some(expected),
    });
    journal.store()?;
    run(source, journal, remote, size).await
}

/// Continues the journaled transfer of `remote` from its checkpoint.
pub async fn resume<S: ChunkSource>(
    source: &S,
    journal: &mut Journal,
    remote: &str,
) -> Result<DownloadReport, TransferError> {
    let cp = journal
        .get(remote)
        .ok_or_else(|| TransferError::EntryMissing(remote.to_owned()))?;
    match std::fs::metadata(&cp.temp_path) {
        Ok(m) if m.len() >= cp.bytes_completed => {}
        _ => {
            return Err(TransferError::EntryMissing(format!(
                "{remote} (temp file missing or short)"
            )))
        }
    }
    let size = source.size(remote).await?;
    if cp.bytes_completed > size {
        return Err(TransferError::RemoteChanged {
            remote: remote.to_owned(),
            size,
            completed: cp.bytes_completed,
        });
    }
    run(source, journal, remote, size).await
}

async fn run<S: ChunkSource>(
    source: &S,
    journal: &mut Journal,
    remote: &str,
    size: u64,
) -> Result<DownloadReport, TransferError> {
    let cp = journal.get(remote).expect("entry present").clone();
    let mut report = DownloadReport {
        size,
        resumed_from: cp.bytes_completed,
        ..Default::default()
    };
    let mut file = OpenOptions::new().write(true).open(&cp.temp_path)?;
    // anything past the checkpoint is unverified
    file.set_len(cp.bytes_completed)?;
    file.seek(SeekFrom::Start(cp.bytes_completed))?;
    let mut done = cp.bytes_completed;
    while done < size {
        let want = cp.chunk_bytes.min(size - done);
        let data = source.read(remote, done, want).await?;
        report.bytes_fetched += data.len() as u64;
        if data.len() as u64 != want {
            return Err(ClientError::Protocol(format!(
                "short read: asked {want} bytes, got {}",
                data.len()
            ))
            .into());
        }
        file.write_all(&data)?;
        file.sync_data()?;
        done += want;
        report.chunks_fetched += 1;
        journal.upsert(Checkpoint {
            bytes_completed: done,
            ..cp.clone()
        });
        journal.store()?;
    }
    drop(file);
    let expected = match &cp.expected_md5 {
        Some(m) => m.clone(),
        None => source.md5(remote).await?,
    };
    let actual = md5_file(&cp.temp_path)?;
    if actual != expected {
        return Err(TransferError::ChecksumMismatch {
            remote: remote.to_owned(),
            expected,
            actual,
        });
    }
    std::fs::rename(&cp.temp_path, cp.local_path())?;
    journal.remove(remote);
    journal.store()?;
    Ok(report)
}
