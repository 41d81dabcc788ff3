use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use gridlet_client::transfer::{
    download, format_journal, parse_journal, resume, temp_path_for, Checkpoint, ChunkSource,
    Journal, TransferError,
};
use gridlet_client::ClientError;
use gridlet_core::worker::files::{md5_bytes, md5_file};
use parking_lot::Mutex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

/// In-memory file server with optional corruption and scripted failures.
struct MemSource {
    data: Vec<u8>,
    md5: String,
    /// Payload bytes handed out, including chunks lost to a failure.
    wire_bytes: AtomicU64,
    reads: AtomicU64,
    /// Offsets (in wire bytes) after which the next read breaks mid-chunk.
    cut_points: Mutex<Vec<u64>>,
}

impl MemSource {
    fn new(data: Vec<u8>) -> Self {
        let md5 = md5_bytes(&data);
        MemSource {
            data,
            md5,
            wire_bytes: 0.into(),
            reads: 0.into(),
            cut_points: Mutex::new(Vec::new()),
        }
    }
}

impl ChunkSource for MemSource {
    async fn size(&self, _remote: &str) -> Result<u64, ClientError> {
        Ok(self.data.len() as u64)
    }

    async fn md5(&self, _remote: &str) -> Result<String, ClientError> {
        Ok(self.md5.clone())
    }

    async fn read(&self, _remote: &str, offset: u64, length: u64) -> Result<Vec<u8>, ClientError> {
        self.reads.fetch_add(1, Ordering::SeqCst);
        let (o, l) = (offset as usize, length as usize);
        let chunk = self.data[o..o + l].to_vec();
        let before = self.wire_bytes.load(Ordering::SeqCst);
        let after = before + length;
        let mut cuts = self.cut_points.lock();
        if let Some(pos) = cuts.iter().position(|c| *c < after) {
            let cut = cuts.remove(pos).max(before);
            // the connection dies after part of the chunk was on the wire
            self.wire_bytes.store(cut + 1, Ordering::SeqCst);
            return Err(ClientError::Transport("connection reset".into()));
        }
        self.wire_bytes.store(after, Ordering::SeqCst);
        Ok(chunk)
    }
}

fn content(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    (0..len).map(|_| rng.random()).collect()
}

fn setup() -> (tempfile::TempDir, Journal, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let journal = Journal::load(dir.path().join("journal")).unwrap();
    let local = dir.path().join("out.bin");
    (dir, journal, local)
}

#[tokio::test]
async fn full_download_without_interruption() {
    let (_d, mut journal, local) = setup();
    let src = MemSource::new(content(10 << 20, 1));
    let report = download(&src, &mut journal, "/big.bin", &local, 64 << 10)
        .await
        .unwrap();
    assert_eq!(report.chunks_fetched, 160);
    assert_eq!(md5_file(&local).unwrap(), src.md5);
    assert!(journal.is_empty());
    assert!(Journal::load(journal.path()).unwrap().is_empty());
    assert!(!temp_path_for(&local).exists());
}

#[tokio::test]
async fn empty_file_finalizes_immediately() {
    let (_d, mut journal, local) = setup();
    let src = MemSource::new(Vec::new());
    let report = download(&src, &mut journal, "/empty", &local, 64 << 10)
        .await
        .unwrap();
    assert_eq!(report.chunks_fetched, 0);
    assert_eq!(std::fs::read(&local).unwrap(), b"");
    assert!(journal.is_empty());
}

#[tokio::test]
async fn checksum_mismatch_keeps_evidence() {
    let (_d, mut journal, local) = setup();
    let mut src = MemSource::new(content(200_000, 2));
    src.md5 = "00000000000000000000000000000000".into();
    let err = download(&src, &mut journal, "/f", &local, 65536)
        .await
        .unwrap_err();
    assert!(
        matches!(err, TransferError::ChecksumMismatch { .. }),
        "{err}"
    );
    assert!(!local.exists());
    assert!(temp_path_for(&local).exists());
    let reloaded = Journal::load(journal.path()).unwrap();
    assert_eq!(reloaded.get("/f").unwrap().bytes_completed, 200_000);
}

#[tokio::test]
async fn twenty_interruptions_cost_at_most_a_chunk_each() {
    let (_d, mut journal, local) = setup();
    let size = 10u64 << 20;
    let chunk = 64u64 << 10;
    let src = MemSource::new(content(size as usize, 3));
    let mut rng = rand::rngs::StdRng::seed_from_u64(99);
    let mut cuts: Vec<u64> = (0..20).map(|_| rng.random_range(0..size)).collect();
    cuts.sort_unstable();
    *src.cut_points.lock() = cuts;

    let mut interruptions = 0;
    let mut result = download(&src, &mut journal, "/big.bin", &local, chunk).await;
    while let Err(e) = result {
        assert!(
            matches!(e, TransferError::Server(ClientError::Transport(_))),
            "{e}"
        );
        interruptions += 1;
        // a fresh process would reload the journal from disk
        journal = Journal::load(journal.path()).unwrap();
        let cp = journal.get("/big.bin").unwrap().clone();
        assert!(cp.bytes_completed % chunk == 0);
        assert!(std::fs::metadata(&cp.temp_path).unwrap().len() >= cp.bytes_completed);
        result = resume(&src, &mut journal, "/big.bin").await;
    }
    assert_eq!(interruptions, 20);
    assert_eq!(md5_file(&local).unwrap(), src.md5);
    let wire = src.wire_bytes.load(Ordering::SeqCst);
    assert!(wire <= size + interruptions * chunk, "{wire} wire bytes");
    assert!(journal.is_empty());
}

#[tokio::test]
async fn resume_of_complete_transfer_only_finalizes() {
    let (_d, mut journal, local) = setup();
    let data = content(100_000, 4);
    let src = MemSource::new(data.clone());
    let temp = temp_path_for(&local);
    std::fs::write(&temp, &data).unwrap();
    journal.upsert(Checkpoint {
        remote_path: "/f".into(),
        temp_path: temp,
        bytes_completed: 100_000,
        chunk_bytes: 65536,
        expected_md5: Some(src.md5.clone()),
    });
    let report = resume(&src, &mut journal, "/f").await.unwrap();
    assert_eq!(report.chunks_fetched, 0);
    assert_eq!(src.reads.load(Ordering::SeqCst), 0);
    assert_eq!(std::fs::read(&local).unwrap(), data);
}

#[tokio::test]
async fn resume_needs_entry_and_temp() {
    let (_d, mut journal, local) = setup();
    let src = MemSource::new(content(10, 5));
    assert!(matches!(
        resume(&src, &mut journal, "/f").await,
        Err(TransferError::EntryMissing(_))
    ));
    journal.upsert(Checkpoint {
        remote_path: "/f".into(),
        temp_path: temp_path_for(&local),
        bytes_completed: 0,
        chunk_bytes: 4,
        expected_md5: None,
    });
    assert!(matches!(
        resume(&src, &mut journal, "/f").await,
        Err(TransferError::EntryMissing(_))
    ));
}

#[tokio::test]
async fn resume_discards_bytes_past_checkpoint() {
    let (_d, mut journal, local) = setup();
    let data = content(10_000, 6);
    let src = MemSource::new(data.clone());
    let temp = temp_path_for(&local);
    // checkpoint says 4096, file holds 5000 bytes of which the tail is junk
    let mut partial = data[..4096].to_vec();
    partial.extend(std::iter::repeat_n(0xAA, 904));
    std::fs::write(&temp, &partial).unwrap();
    journal.upsert(Checkpoint {
        remote_path: "/f".into(),
        temp_path: temp,
        bytes_completed: 4096,
        chunk_bytes: 4096,
        expected_md5: Some(src.md5.clone()),
    });
    let report = resume(&src, &mut journal, "/f").await.unwrap();
    assert_eq!(report.resumed_from, 4096);
    assert_eq!(report.bytes_fetched, 10_000 - 4096);
    assert_eq!(std::fs::read(&local).unwrap(), data);
}

/// Consistency a crash must preserve: an entry with a correct temp prefix,
/// or a verified final file and no entry.
fn assert_crash_consistent(journal_path: &Path, local: &Path, data: &[u8]) {
    let journal = Journal::load(journal_path).unwrap();
    match journal.get("/f") {
        Some(cp) => {
            let temp = std::fs::read(&cp.temp_path).unwrap();
            let n = cp.bytes_completed as usize;
            assert!(temp.len() >= n);
            assert_eq!(&temp[..n], &data[..n]);
            assert!(!local.exists(), "final file present while an entry remains");
        }
        None => {
            if local.exists() {
                assert_eq!(std::fs::read(local).unwrap(), data);
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn random_kills_never_leave_unverified_files() {
    let data = content(300_000, 7);
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    for round in 0..25 {
        let dir = tempfile::tempdir().unwrap();
        let jpath = dir.path().join("journal");
        let local = dir.path().join("out.bin");
        let src = Arc::new(MemSource::new(data.clone()));
        // kill the transfer a random number of polls in, then resume to the end
        for attempt in 0.. {
            let (src2, jpath2, local2) = (src.clone(), jpath.clone(), local.clone());
            let task = tokio::spawn(async move {
                let mut j = Journal::load(&jpath2).unwrap();
                download(&*src2, &mut j, "/f", &local2, 8192).await
            });
            let kill_after = std::time::Duration::from_micros(rng.random_range(0..3000));
            tokio::time::sleep(kill_after).await;
            task.abort();
            let finished = matches!(task.await, Ok(Ok(_)));
            assert_crash_consistent(&jpath, &local, &data);
            if finished || attempt > 200 {
                break;
            }
        }
        let mut j = Journal::load(&jpath).unwrap();
        if j.get("/f").is_some() || !local.exists() {
            download(&*src, &mut j, "/f", &local, 8192).await.unwrap();
        }
        assert_eq!(std::fs::read(&local).unwrap(), data, "round {round}");
        assert!(Journal::load(&jpath).unwrap().is_empty());
    }
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        "[ -~é/]{1,30}",
        "[ -~/]{1,30}",
        any::<u64>(),
        1..u64::MAX,
        proptest::option::of("[0-9a-f]{32}"),
    )
        .prop_map(|(remote, temp, bytes, chunk, md5)| Checkpoint {
            remote_path: remote,
            temp_path: PathBuf::from(temp),
            bytes_completed: bytes,
            chunk_bytes: chunk,
            expected_md5: md5,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn journal_round_trips(entries in prop::collection::vec(checkpoint(), 0..8)) {
        let dir = tempfile::tempdir().unwrap();
        let mut journal = Journal::load(dir.path().join("j")).unwrap();
        for cp in entries {
            journal.upsert(cp);
        }
        journal.store().unwrap();
        let back = Journal::load(journal.path()).unwrap();
        prop_assert_eq!(&back, &journal);
        let text = format_journal(journal.entries());
        prop_assert_eq!(parse_journal(&text).unwrap().len(), journal.entries().count());
    }
}

#[test]
fn truncated_journal_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("j");
    std::fs::write(
        &p,
        "v1 /a /tmp/a.gridlet-part 0 65536 -\nv1 /b /tmp/b.gridlet-part 65",
    )
    .unwrap();
    match Journal::load(&p) {
        Err(TransferError::CorruptJournal { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}
