//! End-to-end acceptance checks. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::future::Future;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use gridlet_client::transfer::{download, resume, ChunkSource, Journal, TransferError};
use gridlet_client::{Auth, ClientError, RpcClient};
use gridlet_core::acl::{AclEntry, AclStore, Decision, Effect, Identity, PrincipalKind};
use gridlet_core::broker::{select_target, PeerInfo};
use gridlet_core::monitor::{load_coefficient, LoadSample, WeightVector};
use gridlet_core::rpc::{
    decode_call, decode_response, encode_call, encode_success, RpcCall, RpcValue,
};
use gridlet_core::worker::files::{md5_bytes, md5_file};
use gridlet_core::worker::{aggregate, RunState};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::*;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Report {
    failed: usize,
    /// Name fragments from the command line; empty runs everything.
    only: Vec<String>,
}

impl Report {
    fn record(&mut self, name: &str, limit: Duration, elapsed: Duration, result: Check) {
        let result = result.and_then(|detail| {
            if elapsed > limit {
                Err(format!(
                    "took {:.1} s, limit {} s ({detail})",
                    elapsed.as_secs_f64(),
                    limit.as_secs()
                ))
            } else {
                Ok(detail)
            }
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.2} s]", elapsed.as_secs_f64()),
            Err(why) => {
                self.failed += 1;
                println!("FAIL  {name}: {why} [{:.2} s]", elapsed.as_secs_f64());
            }
        }
    }

    fn run(&mut self, name: &str, limit_s: u64, f: impl FnOnce() -> Check) {
        if !self.only.is_empty() && !self.only.iter().any(|o| name.contains(o.as_str())) {
            return;
        }
        let t = Instant::now();
        let result =
            std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_text(p)));
        self.record(name, Duration::from_secs(limit_s), t.elapsed(), result);
    }

    fn run_async<F: Future<Output = Check>>(
        &mut self,
        rt: &tokio::runtime::Runtime,
        name: &str,
        limit_s: u64,
        f: impl FnOnce() -> F,
    ) {
        self.run(name, limit_s, || rt.block_on(f()));
    }
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(8)
        .enable_all()
        .build()
        .unwrap();
    let only = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut report = Report { failed: 0, only };
    report.run("coefficient oracle", 5, coefficient_oracle);
    report.run("routing equivalence", 5, routing_equivalence);
    report.run_async(&rt, "throughput scaling", 120, throughput);
    report.run_async(&rt, "staging fidelity", 5, staging_fidelity);
    report.run_async(&rt, "resumable transfer", 30, resumable_transfer);
    report.run_async(&rt, "failover", 30, failover);
    report.run_async(&rt, "acl semantics", 5, acl_semantics);
    report.run_async(&rt, "rpc round-trip", 5, rpc_round_trip);
    report.run("status aggregation", 5, status_aggregation);
    if report.failed > 0 {
        println!("{} criterion(s) failed", report.failed);
        std::process::exit(1);
    }
}

// ---- coefficient -------------------------------------------------------

/// The formula written out independently: reciprocal free-CPU fraction
/// (usage clamped at 99.9 %) scaled by the clock, plus the weighted terms.
fn oracle_coefficient(s: &LoadSample, w: [f64; 4]) -> f64 {
    let cpu = if s.cpu_usage > 99.9 {
        99.9
    } else {
        s.cpu_usage
    };
    let free = 1.0 - cpu / 100.0;
    s.clock_rate / free
        + w[0] * s.mem_usage
        + w[1] * s.disk_io
        + w[2] * s.load1
        + w[3] * f64::from(s.nprocs)
}

fn random_sample(rng: &mut StdRng) -> LoadSample {
    LoadSample {
        cpu_usage: rng.random_range(0.0..=100.0),
        clock_rate: rng.random_range(100.0..5000.0),
        mem_usage: rng.random_range(0.0..=100.0),
        disk_io: rng.random_range(0.0..1000.0),
        load1: rng.random_range(0.0..64.0),
        load5: rng.random_range(0.0..64.0),
        load15: rng.random_range(0.0..64.0),
        nprocs: rng.random_range(0..5000),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn coefficient_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(0xC0EF);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = random_sample(&mut rng);
        let w: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..4.0));
        let got = load_coefficient(&s, &WeightVector::new(w).unwrap());
        let err = rel_err(got, oracle_coefficient(&s, w));
        worst = worst.max(err);
        ensure(err <= 1e-9, || {
            format!("{s:?} {w:?}: {got} vs oracle, rel err {err:e}")
        })?;
    }
    // hand-evaluated anchors
    let ones = WeightVector::default();
    let anchors = [
        (LoadSample::idle(1000.0), 1000.0),
        (
            LoadSample {
                cpu_usage: 50.0,
                ..LoadSample::idle(400.0)
            },
            800.0,
        ),
        (
            LoadSample {
                cpu_usage: 75.0,
                mem_usage: 40.0,
                disk_io: 2.5,
                load1: 1.2,
                nprocs: 120,
                ..LoadSample::idle(200.0)
            },
            963.7,
        ),
        (
            LoadSample {
                cpu_usage: 100.0,
                ..LoadSample::idle(100.0)
            },
            100_000.0,
        ),
    ];
    for (s, expected) in anchors {
        let got = load_coefficient(&s, &ones);
        ensure(rel_err(got, expected) <= 1e-9, || {
            format!("{s:?}: {got}, expected {expected}")
        })?;
    }
    // monotonicity over ordered pairs
    for _ in 0..1000 {
        let base = random_sample(&mut rng);
        let w: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..4.0));
        let wv = WeightVector::new(w).unwrap();
        let lo: f64 = rng.random_range(0.0..99.0);
        let hi: f64 = rng.random_range(lo + 0.01..99.9);
        let a = LoadSample {
            cpu_usage: lo,
            ..base
        };
        let b = LoadSample {
            cpu_usage: hi,
            ..base
        };
        ensure(
            load_coefficient(&a, &wv) < load_coefficient(&b, &wv),
            || format!("cpu {lo} vs {hi} not increasing"),
        )?;
        let more = LoadSample {
            mem_usage: (base.mem_usage + 1.0).min(100.0),
            disk_io: base.disk_io + 1.0,
            load1: base.load1 + 1.0,
            nprocs: base.nprocs + 1,
            ..base
        };
        ensure(
            load_coefficient(&more, &wv) >= load_coefficient(&base, &wv),
            || format!("{base:?}: weighted terms decreased"),
        )?;
    }
    Ok(format!(
        "1000 samples, worst rel err {worst:.1e}; 1000 monotone pairs"
    ))
}

// ---- routing -----------------------------------------------------------

fn routing_equivalence() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5E1E);
    let now = 1_700_000_000i64;
    let window = 30.0;
    let mut none_fresh = 0;
    let mut ties = 0;
    for case in 0..500 {
        let n = rng.random_range(1..=20);
        let mut ids: Vec<String> = (0..100).map(|i| format!("p{i:02}")).collect();
        let mut peers = Vec::new();
        for _ in 0..n {
            let id = ids.swap_remove(rng.random_range(0..ids.len()));
            let mut p = PeerInfo::new(id.as_str(), format!("http://{id}"), now - 100);
            if rng.random_bool(0.9) {
                // few distinct coefficients, so ties are common
                let c = f64::from(rng.random_range(1..6u32)) * 50.0;
                let age = rng.random_range(0..60);
                p = p.with_report(c, now - age);
            }
            peers.push(p);
        }
        // brute force: scan every fresh peer, keep the (coefficient, id) minimum
        let mut best: Option<(&PeerInfo, f64)> = None;
        for p in &peers {
            let Some(r) = &p.last_report else { continue };
            if (r.timestamp as f64) < now as f64 - window {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, bc)) => {
                    r.coefficient < bc || (r.coefficient == bc && p.peer_id < b.peer_id)
                }
            };
            if better {
                best = Some((p, r.coefficient));
            }
        }
        if let Some((_, bc)) = best {
            let fresh_at_min = peers
                .iter()
                .filter(|p| {
                    p.last_report
                        .as_ref()
                        .is_some_and(|r| r.coefficient == bc && r.timestamp >= now - 30)
                })
                .count();
            if fresh_at_min > 1 {
                ties += 1;
            }
        }
        let got = select_target(&peers, now, window)
            .ok()
            .map(|p| p.peer_id.clone());
        let want = best.map(|(p, _)| p.peer_id.clone());
        if want.is_none() {
            none_fresh += 1;
        }
        ensure(got == want, || {
            format!("case {case}: got {got:?}, oracle {want:?}")
        })?;
    }
    Ok(format!(
        "500 registries agree ({ties} with ties, {none_fresh} with no fresh peer)"
    ))
}

// ---- throughput --------------------------------------------------------

const SLEEP4: &str = "#!/bin/sh\nsleep 4\n";
const SUBMIT_WITH_INPUT: &str = "executable = job.sh\narguments = $(input)\nqueue\n";

async fn batch(workers: usize) -> Result<(f64, String), String> {
    let stack = Stack::start(workers, 0.5).await;
    let publish = stack.publish_dir("b0");
    let mut rng = StdRng::seed_from_u64(workers as u64);
    let mut names = Vec::new();
    for i in 0..15 {
        let data: Vec<u8> = (0..1 << 20).map(|_| rng.random()).collect();
        let name = format!("event{i:02}.dat");
        std::fs::write(publish.join(&name), data).unwrap();
        names.push(name);
    }
    let client = stack.client();
    let t = Instant::now();
    let mut jobs = Vec::new();
    for name in &names {
        let req = script_request("sleep4", SLEEP4, SUBMIT_WITH_INPUT, &[name.as_str()]);
        jobs.push(
            client
                .job_submit(&req)
                .await
                .map_err(|e| format!("submit {name}: {e}"))?,
        );
    }
    let submitted = t.elapsed().as_secs_f64();
    let mut pending = jobs.clone();
    while !pending.is_empty() {
        if t.elapsed() > Duration::from_secs(100) {
            return Err(format!("{} job(s) unfinished after 100 s", pending.len()));
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
        let mut still = Vec::new();
        for job in pending {
            let status = client
                .job_status(&job)
                .await
                .map_err(|e| format!("status {job}: {e}"))?;
            match status.aggregate.as_str() {
                "completed" => {}
                "failed" | "killed" => return Err(format!("{job} ended {}", status.aggregate)),
                _ => still.push(job),
            }
        }
        pending = still;
    }
    let mut per_worker: BTreeMap<&str, usize> = BTreeMap::new();
    for job in &jobs {
        let owner = gridlet_core::broker::parse_job_id(job).map_or("?", |(o, _)| o);
        *per_worker.entry(owner).or_default() += 1;
    }
    let mut spread = per_worker
        .iter()
        .map(|(w, n)| format!("{w}:{n}"))
        .collect::<Vec<_>>()
        .join(" ");
    spread.push_str(&format!(", submitted in {submitted:.1} s"));
    Ok((t.elapsed().as_secs_f64(), spread))
}

async fn throughput() -> Check {
    let (four, one) = tokio::join!(batch(4), batch(1));
    let ((four, spread), (one, _)) = (four?, one?);
    let speedup = one / four;
    let detail =
        format!("4 workers {four:.1} s ({spread}), 1 worker {one:.1} s, speedup {speedup:.2}x");
    ensure(four <= 25.0 && one >= 60.0 && speedup >= 2.8, || {
        detail.clone()
    })?;
    Ok(detail)
}

// ---- staging -----------------------------------------------------------

fn file_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

async fn staging_fidelity() -> Check {
    let stack = Stack::start(1, 0.5).await;
    let publish = stack.publish_dir("b0");
    std::fs::create_dir_all(publish.join("set")).unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    let inputs = ["set/a.root", "set/b.root", "set/c.root"];
    for (i, name) in inputs.iter().enumerate() {
        let data: Vec<u8> = (0..10_000 * (i + 1)).map(|_| rng.random()).collect();
        std::fs::write(publish.join(name), data).unwrap();
    }
    let exe = format!("#!/bin/sh\n# {}\nexit 0\n", "x".repeat(4096));
    let submit = "executable = analyse.sh\narguments = $(input)\nqueue\n";
    let mut req = script_request("analyse", &exe, submit, &inputs);
    req.submit_file_name = "analyse.sub".into();
    let client = stack.client();
    let job = client.job_submit(&req).await.map_err(|e| e.to_string())?;

    let job_dir = stack.data_dir("w1").join("staging").join(&job);
    let runs: Vec<String> = file_names(&job_dir)
        .into_iter()
        .filter(|n| job_dir.join(n).is_dir())
        .collect();
    ensure(runs == ["run-0", "run-1", "run-2"], || {
        format!("run dirs {runs:?}")
    })?;
    for (i, run) in runs.iter().enumerate() {
        let dir = job_dir.join(run);
        let base = inputs[i].rsplit('/').next().unwrap();
        let mut want = vec![
            "analyse.sh".to_string(),
            "analyse.sub".to_string(),
            base.to_string(),
        ];
        want.sort();
        let got = file_names(&dir);
        ensure(got == want, || format!("{run}: {got:?}"))?;
        ensure(
            std::fs::read(dir.join("analyse.sh")).unwrap() == exe.as_bytes(),
            || format!("{run}: executable differs"),
        )?;
        ensure(
            std::fs::read(dir.join("analyse.sub")).unwrap() == submit.as_bytes(),
            || format!("{run}: submit file differs"),
        )?;
        ensure(
            md5_file(&dir.join(base)).unwrap() == md5_file(&publish.join(inputs[i])).unwrap(),
            || format!("{run}: input differs"),
        )?;
    }
    Ok(format!(
        "{job}: 3 run dirs, each exactly {{executable, submit file, own input}}, byte-identical"
    ))
}

// ---- transfer ----------------------------------------------------------

/// A real server connection whose reads break at scripted wire offsets.
struct FlakyServer {
    inner: RpcClient,
    wire: AtomicU64,
    cuts: parking_lot::Mutex<Vec<u64>>,
}

impl ChunkSource for FlakyServer {
    async fn size(&self, remote: &str) -> Result<u64, ClientError> {
        self.inner.size(remote).await
    }

    async fn md5(&self, remote: &str) -> Result<String, ClientError> {
        ChunkSource::md5(&self.inner, remote).await
    }

    async fn read(&self, remote: &str, offset: u64, length: u64) -> Result<Vec<u8>, ClientError> {
        let bytes = self.inner.read(remote, offset, length).await?;
        let before = self.wire.load(Ordering::SeqCst);
        let after = before + bytes.len() as u64;
        let mut cuts = self.cuts.lock();
        if let Some(pos) = cuts.iter().position(|c| *c < after) {
            // only part of the chunk made it before the connection dropped
            let cut = cuts.remove(pos).max(before);
            self.wire.store(cut + 1, Ordering::SeqCst);
            return Err(ClientError::Transport("connection reset by peer".into()));
        }
        self.wire.store(after, Ordering::SeqCst);
        Ok(bytes)
    }
}

async fn resumable_transfer() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let node = start(&NodeSpec::leader("f0", 10.0), &dir.path().join("f0")).await;
    let size = 10u64 << 20;
    let chunk = 64u64 << 10;
    let mut rng = StdRng::seed_from_u64(0x7F);
    let data: Vec<u8> = (0..size).map(|_| rng.random()).collect();
    std::fs::write(dir.path().join("f0/pub/big.bin"), &data).unwrap();
    let mut cuts: Vec<u64> = (0..20).map(|_| rng.random_range(0..size)).collect();
    cuts.sort_unstable();
    let source = FlakyServer {
        inner: admin(node.url()),
        wire: AtomicU64::new(0),
        cuts: parking_lot::Mutex::new(cuts),
    };

    let local = dir.path().join("big.bin");
    let journal_path = dir.path().join("journal");
    let mut journal = Journal::load(&journal_path).map_err(|e| e.to_string())?;
    let mut interruptions = 0u64;
    let mut result = download(&source, &mut journal, "/big.bin", &local, chunk).await;
    while let Err(e) = result {
        ensure(
            matches!(e, TransferError::Server(ClientError::Transport(_))),
            || format!("unexpected {e}"),
        )?;
        interruptions += 1;
        ensure(interruptions <= 20, || {
            "more interruptions than scripted".into()
        })?;
        // as a fresh process would
        journal = Journal::load(&journal_path).map_err(|e| e.to_string())?;
        result = resume(&source, &mut journal, "/big.bin").await;
    }
    let server_md5 = admin(node.url())
        .file_md5("/big.bin")
        .await
        .map_err(|e| e.to_string())?;
    let local_md5 = md5_file(&local).unwrap();
    let wire = source.wire.load(Ordering::SeqCst);
    ensure(interruptions == 20, || {
        format!("{interruptions} interruptions")
    })?;
    ensure(local_md5 == server_md5, || {
        format!("md5 {local_md5} vs server {server_md5}")
    })?;
    ensure(wire <= size + 20 * chunk, || format!("{wire} wire bytes"))?;
    Ok(format!(
        "20 interruptions, md5 {server_md5} matches, {wire} wire bytes (bound {})",
        size + 20 * chunk
    ))
}

// ---- failover ----------------------------------------------------------

async fn leaders(urls: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for url in urls {
        if let Ok(r) = admin(url)
            .with_timeout(Duration::from_millis(300))
            .broker_role()
            .await
        {
            if r.role == "leader" {
                out.push(r.peer_id);
            }
        }
    }
    out
}

async fn failover() -> Check {
    let mut stack = Stack::start(2, 0.5).await;
    for id in ["b0", "w1", "w2"] {
        std::fs::write(stack.publish_dir(id).join("in.dat"), b"event data").unwrap();
    }
    let req = script_request(
        "pre",
        "#!/bin/sh\necho done\n",
        "executable = job.sh\noutput = out.txt\nqueue\n",
        &["in.dat"],
    );
    let client = stack.client();
    let before = client
        .job_submit(&req)
        .await
        .map_err(|e| format!("pre-failover submit: {e}"))?;
    ensure(
        wait_aggregate(&client, &before, "completed", Duration::from_secs(5)).await,
        || "pre job".into(),
    )?;

    let worker_urls: Vec<String> = (0..2).map(|i| stack.worker(i).url().to_owned()).collect();
    stack.broker.take().unwrap().kill();
    let t = Instant::now();
    let mut elected = Vec::new();
    while t.elapsed() < Duration::from_secs(6) {
        elected = leaders(&worker_urls).await;
        if elected.len() == 1 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    let took = t.elapsed().as_secs_f64();
    ensure(elected.len() == 1, || {
        format!("leaders after {took:.1} s: {elected:?}")
    })?;
    ensure(took <= 4.0, || {
        format!("new leader {} after {took:.1} s", elected[0])
    })?;

    // clients fall back through the broker list
    let urls = format!("{},{}", stack.broker_url, worker_urls.join(","));
    let client = RpcClient::new(&urls).with_auth(Auth::Credential(admin_credential()));
    let status = client
        .job_status(&before)
        .await
        .map_err(|e| format!("status of {before}: {e}"))?;
    ensure(status.aggregate.as_str() == "completed", || {
        format!("{before} is {}", status.aggregate)
    })?;
    let after = client
        .job_submit(&req)
        .await
        .map_err(|e| format!("post-failover submit: {e}"))?;
    ensure(
        wait_aggregate(&client, &after, "completed", Duration::from_secs(5)).await,
        || "post job".into(),
    )?;

    tokio::time::sleep(Duration::from_secs(1)).await;
    let settled = leaders(&worker_urls).await;
    ensure(settled == elected, || {
        format!("leadership moved again: {settled:?}")
    })?;
    Ok(format!(
        "{} leads {took:.1} s after the broker died; {before} still visible, {after} accepted",
        elected[0]
    ))
}

// ---- acl ---------------------------------------------------------------

/// Deny-overrides with default deny, written out directly.
fn oracle_decision(entries: &[(Effect, bool)]) -> Decision {
    if entries.iter().any(|(e, m)| *e == Effect::Deny && *m) {
        Decision::Deny
    } else if entries.iter().any(|(e, m)| *e == Effect::Allow && *m) {
        Decision::Allow
    } else {
        Decision::Deny
    }
}

fn entry_for(kind: PrincipalKind, effect: Effect, matching: bool) -> AclEntry {
    let principal = match (kind, matching) {
        (PrincipalKind::DnSubstring, true) => "CN=alice",
        (PrincipalKind::DnSubstring, false) => "CN=bob",
        (PrincipalKind::Vo, true) => "cms",
        (PrincipalKind::Vo, false) => "atlas",
    };
    AclEntry::new(kind, effect, principal, "file")
}

async fn acl_semantics() -> Check {
    let alice = Identity::new("/O=test/CN=alice", ["cms"]);
    let mut cells = Vec::new();
    for effect in [Effect::Allow, Effect::Deny] {
        for kind in [PrincipalKind::DnSubstring, PrincipalKind::Vo] {
            for matching in [true, false] {
                cells.push((kind, effect, matching));
            }
        }
    }
    let store = AclStore::in_memory();
    ensure(store.authorize(&alice, "file.ls") == Decision::Deny, || {
        "empty table allowed".into()
    })?;
    let mut checked = 0;
    for a in &cells {
        for b in std::iter::once(None).chain(cells.iter().map(Some)) {
            let store = AclStore::in_memory();
            let mut facts = Vec::new();
            for (kind, effect, matching) in std::iter::once(a).chain(b) {
                store
                    .add_unchecked(entry_for(*kind, *effect, *matching))
                    .unwrap();
                facts.push((*effect, *matching));
            }
            let want = oracle_decision(&facts);
            let got = store.authorize(&alice, "file.ls");
            ensure(got == want, || {
                format!("{a:?} + {b:?}: {got:?}, expected {want:?}")
            })?;
            ensure(
                store.authorize(&alice, "job.submit") == Decision::Deny,
                || "scope leaked".into(),
            )?;
            checked += 1;
        }
    }
    let persisted = acl_persists_across_restart().await?;
    Ok(format!("{checked} tables match the oracle; {persisted}"))
}

struct Daemon(std::process::Child);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

async fn spawn_daemon(config: &Path, url: &str) -> Result<Daemon, String> {
    let child = std::process::Command::new(env!("CARGO_BIN_EXE_gridletd"))
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .spawn()
        .map_err(|e| e.to_string())?;
    let daemon = Daemon(child);
    let probe = admin(url).with_timeout(Duration::from_millis(200));
    let up = wait_for(Duration::from_secs(3), || async {
        probe.broker_role().await.is_ok()
    })
    .await;
    ensure(up, || "gridletd did not come up".into())?;
    Ok(daemon)
}

async fn acl_persists_across_restart() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let url = format!("http://127.0.0.1:{port}");
    let mut spec = NodeSpec::leader("a0", 10.0);
    spec.listen = format!("127.0.0.1:{port}");
    let cfg = config(&spec, &dir.path().join("a0"));
    let cfg_path = dir.path().join("a0.toml");
    std::fs::write(
        &cfg_path,
        format!(
            "[node]\nlisten = \"{}\"\ndata_dir = \"{}\"\nsecret = \"{}\"\n[broker]\npeer_id = \"a0\"\nleader = true\n",
            cfg.node.listen,
            cfg.node.data_dir.display(),
            SECRET
        ),
    )
    .unwrap();

    let alice =
        RpcClient::new(&url).with_auth(Auth::Credential(credential("/O=test/CN=alice", &["cms"])));
    let bob =
        RpcClient::new(&url).with_auth(Auth::Credential(credential("/O=test/CN=bob", &["cms"])));
    let observe = || async {
        let table = admin(&url).acl_list().await.map_err(|e| e.to_string())?;
        let a = alice.file_ls("/", "*").await.is_ok();
        let b = bob.file_ls("/", "*").await.is_ok();
        Ok::<_, String>((table, a, b))
    };

    let daemon = spawn_daemon(&cfg_path, &url).await?;
    let admin_client = admin(&url);
    admin_client
        .acl_add("vo", "allow", "cms", "file")
        .await
        .map_err(|e| e.to_string())?;
    admin_client
        .acl_add("dn", "deny", "CN=bob", "file.ls")
        .await
        .map_err(|e| e.to_string())?;
    let before = observe().await?;
    ensure(before.1 && !before.2, || {
        format!("before restart: alice {} bob {}", before.1, before.2)
    })?;
    drop(daemon);

    let _daemon = spawn_daemon(&cfg_path, &url).await?;
    let after = observe().await?;
    ensure(after == before, || {
        format!("table or decisions changed across restart: {after:?}")
    })?;
    Ok(format!(
        "{} entries and decisions survive a gridletd restart",
        after.0.len()
    ))
}

// ---- rpc ---------------------------------------------------------------

fn random_string(rng: &mut StdRng) -> String {
    const AWKWARD: &[char] = &[
        '<', '>', '&', '"', '\'', '\t', '\n', 'é', '€', '😀', ']', ';',
    ];
    let n = rng.random_range(0..20);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                AWKWARD[rng.random_range(0..AWKWARD.len())]
            } else {
                rng.random_range(' '..='~')
            }
        })
        .collect()
}

fn random_value(rng: &mut StdRng, depth: u32) -> RpcValue {
    let pick = if depth == 0 {
        rng.random_range(0..5)
    } else {
        rng.random_range(0..7)
    };
    match pick {
        0 => RpcValue::String(random_string(rng)),
        1 => RpcValue::Int(rng.random()),
        2 => {
            let d = loop {
                let d = f64::from_bits(rng.random());
                if d.is_finite() {
                    break d;
                }
            };
            RpcValue::Double(d)
        }
        3 => RpcValue::Bool(rng.random()),
        4 => RpcValue::Base64((0..rng.random_range(0..48)).map(|_| rng.random()).collect()),
        5 => RpcValue::Array(
            (0..rng.random_range(0..5))
                .map(|_| random_value(rng, depth - 1))
                .collect(),
        ),
        _ => {
            let members: BTreeMap<String, RpcValue> = (0..rng.random_range(0..5))
                .map(|_| (random_string(rng), random_value(rng, depth - 1)))
                .collect();
            RpcValue::Struct(members.into_iter().collect())
        }
    }
}

fn bitwise_eq(a: &RpcValue, b: &RpcValue) -> bool {
    match (a, b) {
        (RpcValue::Double(x), RpcValue::Double(y)) => x.to_bits() == y.to_bits(),
        (RpcValue::Array(x), RpcValue::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| bitwise_eq(a, b))
        }
        (RpcValue::Struct(x), RpcValue::Struct(y)) => {
            x.len() == y.len()
                && x.iter()
                    .zip(y)
                    .all(|((ka, va), (kb, vb))| ka == kb && bitwise_eq(va, vb))
        }
        _ => a == b,
    }
}

async fn rpc_round_trip() -> Check {
    let mut rng = StdRng::seed_from_u64(0x4B1D);
    for i in 0..1000 {
        let v = random_value(&mut rng, 3);
        let call = RpcCall::new("file.read", vec![v.clone()]);
        let back = decode_call(&encode_call(&call).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure(
            back.params.len() == 1 && bitwise_eq(&back.params[0], &v),
            || format!("call {i}: {v:?}"),
        )?;
        let resp = decode_response(&encode_success(&v).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure(resp.as_ref().is_ok_and(|r| bitwise_eq(r, &v)), || {
            format!("response {i}: {v:?}")
        })?;
    }

    let dir = tempfile::tempdir().unwrap();
    let node = start(&NodeSpec::leader("r0", 10.0), &dir.path().join("r0")).await;
    let known: Vec<u8> = (0..1024u32).map(|i| (i * 31 % 256) as u8).collect();
    std::fs::write(dir.path().join("r0/pub/known.bin"), &known).unwrap();
    let body = encode_call(&RpcCall::new(
        "file.read",
        vec![
            RpcValue::from("/known.bin"),
            RpcValue::Int(0),
            RpcValue::Int(0),
        ],
    ))
    .unwrap();
    use base64::Engine;
    let resp = reqwest::Client::new()
        .post(format!("{}/rpc", node.url()))
        .header("X-Binary-Response", "1")
        .header(
            "X-Credential",
            base64::engine::general_purpose::STANDARD.encode(admin_credential()),
        )
        .body(body)
        .send()
        .await
        .map_err(|e| e.to_string())?;
    let ctype = resp
        .headers()
        .get("content-type")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_owned();
    let status = resp
        .headers()
        .get("x-rpc-status")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_owned();
    let bytes = resp.bytes().await.map_err(|e| e.to_string())?;
    ensure(
        ctype == "application/octet-stream" && status == "ok",
        || format!("framing {ctype} / {status}"),
    )?;
    ensure(bytes[..] == known[..], || {
        format!("{} bytes differ from the known file", bytes.len())
    })?;
    let via_client = admin(node.url())
        .file_read("/known.bin", 0, 0)
        .await
        .map_err(|e| e.to_string())?;
    ensure(md5_bytes(&via_client) == md5_bytes(&known), || {
        "client read differs".into()
    })?;
    Ok(
        "1000 random trees survive calls and responses bitwise; 1 KiB binary fetch identical"
            .into(),
    )
}

// ---- status ------------------------------------------------------------

/// The aggregation lattice, evaluated by counting.
fn oracle_aggregate(runs: &[RunState]) -> RunState {
    let count = |s: RunState| runs.iter().filter(|r| **r == s).count();
    if count(RunState::Killed) > 0 {
        RunState::Killed
    } else if count(RunState::Failed) > 0 {
        RunState::Failed
    } else if !runs.is_empty() && count(RunState::Completed) == runs.len() {
        RunState::Completed
    } else if count(RunState::Running) > 0 {
        RunState::Running
    } else {
        RunState::Queued
    }
}

fn status_aggregation() -> Check {
    let states = RunState::ALL;
    let mut n = 0;
    let mut combos: Vec<Vec<RunState>> = vec![vec![]];
    for _ in 0..3 {
        combos = combos
            .iter()
            .flat_map(|c| {
                states
                    .iter()
                    .map(move |s| c.iter().copied().chain([*s]).collect::<Vec<_>>())
            })
            .collect();
        for c in &combos {
            let (got, want) = (aggregate(c), oracle_aggregate(c));
            ensure(got == want, || format!("{c:?}: {got}, lattice says {want}"))?;
            n += 1;
        }
    }
    ensure(combos.len() == 216, || {
        format!("{} three-run combinations", combos.len())
    })?;
    Ok(format!(
        "{n} combinations of 1-3 runs over 6 states match the lattice"
    ))
}
