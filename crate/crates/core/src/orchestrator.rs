//! Drives a remote build and pulls back its heap images while it runs.
//!
//! The remote artifact directory is snapshotted before the build starts.
//! While the build runs it is listed every poll interval; a file that is new
//! relative to the snapshot and unchanged in size and mtime across two
//! consecutive listings is complete and gets synchronized, at most once per
//! run. After the build exits, listing continues until nothing new is still
//! changing. In default mode the ancestors of the targets are synchronized
//! afterwards even if the build did not touch them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime};

use log::{debug, warn};
use thiserror::Error;
use tokio::io::AsyncReadExt;
use tokio::task::JoinSet;

use crate::delta_sync::{cleanup_temp_files, fetch_full, AgentClient, SyncError, SyncStats, DEFAULT_BLOCK_SIZE};
use crate::hostkeys::HostKeyStore;
use crate::session_graph::SessionCatalog;
use crate::transport::ssh::{SshConnection, SshOptions};
use crate::transport::{BoxedRead, Connection, Endpoint, ProxySpec, RemoteFileStat, TransportError};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(2);
pub const DEFAULT_AGENT_COMMAND: &str = "remote_build";
pub const DEFAULT_REMOTE_BASE: &str = "~";
/// Listings after the build exits, at most, while waiting for stragglers.
const FINAL_POLL_LIMIT: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildRequest {
    pub sessions: Vec<String>,
    /// `-d` arguments as given; `$VAR` references are expanded locally when
    /// the catalog is loaded.
    pub session_dirs: Vec<String>,
    pub remote: Endpoint,
    pub remote_base: String,
    pub remote_opts: Vec<String>,
    pub incremental: bool,
    pub proxy: Option<ProxySpec>,
    pub verbose: bool,
}

/// Tunables beyond the short-flag surface.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub poll_interval: Duration,
    pub block_size: u32,
    /// Remote artifact root; `<remote_base>/heaps` when unset.
    pub artifact_root: Option<String>,
    pub local_root: PathBuf,
    pub sync_jobs: usize,
    pub agent_command: String,
}

impl RunConfig {
    pub fn new(local_root: impl Into<PathBuf>) -> Self {
        RunConfig {
            poll_interval: DEFAULT_POLL_INTERVAL,
            block_size: DEFAULT_BLOCK_SIZE,
            artifact_root: None,
            local_root: local_root.into(),
            sync_jobs: 1,
            agent_command: DEFAULT_AGENT_COMMAND.to_string(),
        }
    }

    pub fn artifact_root_for(&self, req: &BuildRequest) -> String {
        self.artifact_root
            .clone()
            .unwrap_or_else(|| default_artifact_root(&req.remote_base))
    }
}

fn join_remote(base: &str, rel: &str) -> String {
    if base == "/" {
        format!("/{rel}")
    } else {
        format!("{}/{rel}", base.trim_end_matches('/'))
    }
}

pub fn default_artifact_root(remote_base: &str) -> String {
    join_remote(remote_base, "heaps")
}

/// The remote build invocation. Options go in verbatim, one word each.
pub fn build_command(req: &BuildRequest) -> Vec<String> {
    let mut argv = vec![
        join_remote(&req.remote_base, "bin/isabelle"),
        "build".to_string(),
        "-b".to_string(),
    ];
    argv.extend(req.remote_opts.iter().cloned());
    argv.extend(req.sessions.iter().cloned());
    argv
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeapSnapshot {
    pub taken_at: SystemTime,
    /// Relative path to (size, mtime).
    pub files: BTreeMap<String, (u64, u64)>,
}

impl HeapSnapshot {
    pub fn from_listing(listing: &[RemoteFileStat]) -> Self {
        HeapSnapshot {
            taken_at: SystemTime::now(),
            files: listing.iter().map(|f| (f.path.clone(), (f.size, f.mtime))).collect(),
        }
    }
}

pub async fn snapshot_heaps(conn: &dyn Connection, artifact_root: &str) -> Result<HeapSnapshot, TransportError> {
    Ok(HeapSnapshot::from_listing(&conn.stat_tree(artifact_root).await?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeapArtifact {
    pub session: String,
    pub remote_path: String,
    pub size: u64,
    pub mtime: u64,
    pub stable: bool,
}

impl HeapArtifact {
    fn stat(&self) -> RemoteFileStat {
        RemoteFileStat {
            path: self.remote_path.clone(),
            size: self.size,
            mtime: self.mtime,
        }
    }
}

const LOG_SUFFIXES: &[&str] = &[".gz", ".db", ".log", ".xz", ".zst"];

/// Session an artifact belongs to: the file's base name, with a log suffix
/// removed for files under a `log` directory.
pub fn session_of(path: &str) -> String {
    let (dir, base) = match path.rsplit_once('/') {
        Some((d, b)) => (d, b),
        None => ("", path),
    };
    if dir == "log" || dir.ends_with("/log") {
        for suffix in LOG_SUFFIXES {
            if let Some(stem) = base.strip_suffix(suffix) {
                if !stem.is_empty() {
                    return stem.to_string();
                }
            }
        }
    }
    base.to_string()
}

/// Files of `cur` that are new relative to `snapshot`, each flagged stable
/// when `prev` lists it with the same size and mtime.
pub fn detect_new_heaps(snapshot: &HeapSnapshot, prev: &[RemoteFileStat], cur: &[RemoteFileStat]) -> Vec<HeapArtifact> {
    let before: BTreeMap<&str, (u64, u64)> = prev.iter().map(|f| (f.path.as_str(), (f.size, f.mtime))).collect();
    cur.iter()
        .filter(|f| snapshot.files.get(&f.path) != Some(&(f.size, f.mtime)))
        .map(|f| HeapArtifact {
            session: session_of(&f.path),
            remote_path: f.path.clone(),
            size: f.size,
            mtime: f.mtime,
            stable: before.get(f.path.as_str()) == Some(&(f.size, f.mtime)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileOutcome {
    pub session: String,
    pub remote_path: String,
    /// Listing entry that was declared stable.
    pub size: u64,
    pub mtime: u64,
    pub result: Result<SyncStats, String>,
    /// Time since the start of the run when the sync finished.
    pub finished_after: Duration,
    pub during_build: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionOutcome {
    /// Every file of the session was installed locally.
    pub synced: bool,
    /// Totals over the session's files.
    pub stats: SyncStats,
    pub error: Option<String>,
    /// Required in default mode but no file of it exists remotely.
    pub missing: bool,
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub exit_status: i32,
    pub per_session: BTreeMap<String, SessionOutcome>,
    pub files: Vec<FileOutcome>,
    pub total_wire_bytes: u64,
    pub build_duration: Duration,
    /// Wall-clock time spent inside sync batches.
    pub sync_duration: Duration,
    /// Time since the start of the run when the build's exit was observed.
    pub build_exited_after: Duration,
    /// Sessions of synced artifacts that the local catalog does not know.
    pub unknown_sessions: Vec<String>,
}

impl BuildReport {
    pub fn sync_failures(&self) -> usize {
        self.files.iter().filter(|f| f.result.is_err()).count()
    }

    pub fn synced_paths(&self) -> Vec<&str> {
        self.files
            .iter()
            .filter(|f| f.result.is_ok())
            .map(|f| f.remote_path.as_str())
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("cannot prepare local artifact root {path}: {source}")]
    LocalRoot {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Where progress lines and the remote build's output go.
#[derive(Clone)]
pub enum Progress {
    /// Progress on stderr; build output on stdout/stderr as produced.
    Console { verbose: bool },
    Silent,
    Capture(Arc<CapturedOutput>),
}

#[derive(Debug, Default)]
pub struct CapturedOutput {
    pub lines: Mutex<Vec<String>>,
    pub build_stdout: Mutex<Vec<u8>>,
    pub build_stderr: Mutex<Vec<u8>>,
}

impl Progress {
    pub fn capture() -> (Progress, Arc<CapturedOutput>) {
        let c = Arc::new(CapturedOutput::default());
        (Progress::Capture(c.clone()), c)
    }

    pub fn info(&self, msg: &str) {
        match self {
            Progress::Console { .. } => eprintln!("{msg}"),
            Progress::Silent => {}
            Progress::Capture(c) => c.lines.lock().unwrap().push(msg.to_string()),
        }
    }

    /// Shown only with `-v`; always captured.
    pub fn detail(&self, msg: &str) {
        match self {
            Progress::Console { verbose: true } => eprintln!("{msg}"),
            Progress::Capture(c) => c.lines.lock().unwrap().push(msg.to_string()),
            _ => {}
        }
    }

    fn build_output(&self, is_stderr: bool, chunk: &[u8]) {
        match self {
            Progress::Console { .. } => {
                if is_stderr {
                    let _ = std::io::stderr().write_all(chunk);
                } else {
                    let mut out = std::io::stdout();
                    let _ = out.write_all(chunk);
                    let _ = out.flush();
                }
            }
            Progress::Silent => {}
            Progress::Capture(c) => {
                let buf = if is_stderr { &c.build_stderr } else { &c.build_stdout };
                buf.lock().unwrap().extend_from_slice(chunk);
            }
        }
    }
}

/// Opens the SSH connection for `req`, through the proxy when one is set.
pub async fn connect(
    req: &BuildRequest,
    store: Arc<dyn HostKeyStore>,
    opts: &SshOptions,
) -> Result<Arc<dyn Connection>, TransportError> {
    let conn = match &req.proxy {
        Some(proxy) => SshConnection::connect_via_proxy(proxy, &req.remote, store, opts).await?,
        None => SshConnection::connect(&req.remote, store, opts).await?,
    };
    Ok(Arc::new(conn))
}

/// Pulls artifacts over agent channels, or with plain `cat` once the agent
/// turned out to be missing on the remote side.
struct Syncer {
    conn: Arc<dyn Connection>,
    artifact_root: String,
    local_root: PathBuf,
    agent_argv: Vec<String>,
    block_size: u32,
    jobs: usize,
    idle: Vec<AgentClient>,
    fallback: bool,
    busy: Duration,
}

type SyncResult = (RemoteFileStat, Result<SyncStats, String>, Instant);

impl Syncer {
    async fn sync_batch(&mut self, files: Vec<RemoteFileStat>, progress: &Progress) -> Vec<SyncResult> {
        if files.is_empty() {
            return Vec::new();
        }
        let started = Instant::now();
        let lanes = self.jobs.max(1).min(files.len());
        let mut shares: Vec<Vec<RemoteFileStat>> = vec![Vec::new(); lanes];
        for (i, f) in files.into_iter().enumerate() {
            shares[i % lanes].push(f);
        }
        let mut set = JoinSet::new();
        for (lane, share) in shares.into_iter().enumerate() {
            let worker = Worker {
                conn: self.conn.clone(),
                artifact_root: self.artifact_root.clone(),
                local_root: self.local_root.clone(),
                agent_argv: self.agent_argv.clone(),
                block_size: self.block_size,
                client: self.idle.pop(),
                fallback: self.fallback,
                progress: progress.clone(),
            };
            set.spawn(async move { (lane, worker.run(share).await) });
        }
        let mut lanes_out = Vec::new();
        while let Some(joined) = set.join_next().await {
            match joined {
                Ok((lane, (client, fallback, results))) => {
                    if let Some(c) = client {
                        self.idle.push(c);
                    }
                    if fallback && !self.fallback {
                        self.fallback = true;
                    }
                    lanes_out.push((lane, results));
                }
                Err(e) => warn!("sync worker failed: {e}"),
            }
        }
        lanes_out.sort_by_key(|(lane, _)| *lane);
        self.busy += started.elapsed();
        lanes_out.into_iter().flat_map(|(_, r)| r).collect()
    }

    async fn close(&mut self) {
        for c in self.idle.drain(..) {
            let _ = c.quit().await;
        }
    }
}

struct Worker {
    conn: Arc<dyn Connection>,
    artifact_root: String,
    local_root: PathBuf,
    agent_argv: Vec<String>,
    block_size: u32,
    client: Option<AgentClient>,
    fallback: bool,
    progress: Progress,
}

impl Worker {
    async fn run(mut self, files: Vec<RemoteFileStat>) -> (Option<AgentClient>, bool, Vec<SyncResult>) {
        let mut out = Vec::new();
        for f in files {
            let local = self.local_root.join(&f.path);
            let res = self.sync_one(&f, &local).await.map_err(|e| e.to_string());
            out.push((f, res, Instant::now()));
        }
        (self.client, self.fallback, out)
    }

    async fn sync_one(&mut self, f: &RemoteFileStat, local: &Path) -> Result<SyncStats, SyncError> {
        if !self.fallback && self.client.is_none() {
            let channel = self.conn.open_channel(&self.agent_argv).await?;
            match AgentClient::connect(channel).await {
                Ok(c) => self.client = Some(c),
                Err(SyncError::AgentUnavailable(detail)) => {
                    self.progress.info(&format!(
                        "warning: sync agent `{}` unavailable on the remote host ({detail}); \
                         falling back to full-file copies",
                        self.agent_argv.join(" ")
                    ));
                    self.fallback = true;
                }
                Err(e) => return Err(e),
            }
        }
        if self.fallback {
            return fetch_full(self.conn.as_ref(), &self.artifact_root, f, local).await;
        }
        let client = self.client.as_mut().expect("agent client present");
        let res = client.sync_file(&f.path, local, self.block_size).await;
        if !client.is_usable() {
            self.client = None;
        }
        res
    }
}

struct RunState<'a> {
    catalog: &'a SessionCatalog,
    progress: &'a Progress,
    started: Instant,
    snapshot: HeapSnapshot,
    prev: Vec<RemoteFileStat>,
    /// Remote paths already synced, or attempted, in this run.
    handled: BTreeSet<String>,
    outcomes: Vec<FileOutcome>,
    warned_unknown: BTreeSet<String>,
    build_exited: Option<Instant>,
}

impl RunState<'_> {
    fn record(&mut self, results: Vec<SyncResult>) {
        for (stat, result, at) in results {
            let session = session_of(&stat.path);
            match &result {
                Ok(s) => {
                    if s.mtime != stat.mtime {
                        warn!(
                            "{} changed after it was declared complete (mtime {} then {})",
                            stat.path, stat.mtime, s.mtime
                        );
                    }
                    self.progress.info(&format!("synced {} ({} bytes)", stat.path, s.source_len));
                    self.progress.detail(&format!(
                        "  {}: literal {} B, copied {} B, wire {} B, {:.3} s",
                        stat.path,
                        s.literal_bytes,
                        s.copied_bytes,
                        s.wire_bytes,
                        s.elapsed.as_secs_f64()
                    ));
                }
                Err(e) => self.progress.info(&format!("failed to sync {}: {e}", stat.path)),
            }
            self.outcomes.push(FileOutcome {
                session,
                remote_path: stat.path.clone(),
                size: stat.size,
                mtime: stat.mtime,
                result,
                finished_after: at.duration_since(self.started),
                during_build: self.build_exited.is_none_or(|t| at < t),
            });
        }
    }

    fn note_unknown(&mut self, session: &str) {
        if !self.catalog.contains(session) && self.warned_unknown.insert(session.to_string()) {
            self.progress.info(&format!(
                "warning: {session} is not a session of the local catalog; syncing it anyway"
            ));
        }
    }

    /// One listing plus syncing whatever became stable. Returns whether new
    /// but still changing files remain.
    async fn poll(&mut self, conn: &dyn Connection, root: &str, syncer: &mut Syncer) -> bool {
        let cur = match conn.stat_tree(root).await {
            Ok(c) => c,
            Err(e) => {
                warn!("listing {root} failed: {e}");
                return true;
            }
        };
        let found = detect_new_heaps(&self.snapshot, &self.prev, &cur);
        let mut ready = Vec::new();
        let mut pending = false;
        for a in found.iter().filter(|a| !self.handled.contains(&a.remote_path)) {
            if a.stable {
                ready.push(a.clone());
            } else {
                debug!("{} not stable yet ({} bytes)", a.remote_path, a.size);
                pending = true;
            }
        }
        self.prev = cur;
        for a in &ready {
            self.note_unknown(&a.session);
            self.handled.insert(a.remote_path.clone());
        }
        let results = syncer.sync_batch(ready.iter().map(HeapArtifact::stat).collect(), self.progress).await;
        self.record(results);
        pending
    }
}

fn forward_output(mut stream: BoxedRead, is_stderr: bool, progress: Progress) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut buf = vec![0u8; 16 * 1024];
        loop {
            match stream.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => progress.build_output(is_stderr, &buf[..n]),
            }
        }
    })
}

/// Runs the whole build over an open connection.
pub async fn run(
    conn: Arc<dyn Connection>,
    req: &BuildRequest,
    catalog: &SessionCatalog,
    cfg: &RunConfig,
    progress: &Progress,
) -> Result<BuildReport, RunError> {
    let started = Instant::now();
    let root = cfg.artifact_root_for(req);
    std::fs::create_dir_all(&cfg.local_root).map_err(|source| RunError::LocalRoot {
        path: cfg.local_root.clone(),
        source,
    })?;
    for stale in cleanup_temp_files(&cfg.local_root).unwrap_or_default() {
        debug!("removed stale temp file {}", stale.display());
    }

    let snapshot = snapshot_heaps(conn.as_ref(), &root).await?;
    progress.detail(&format!("{} files under {root} before the build", snapshot.files.len()));

    let argv = build_command(req);
    progress.info(&format!("starting remote build: {}", argv.join(" ")));
    let build_started = Instant::now();
    let build = conn.exec(&argv).await?;
    let out_task = forward_output(build.stdout, false, progress.clone());
    let err_task = forward_output(build.stderr, true, progress.clone());
    let (exit_tx, mut exit_rx) = tokio::sync::oneshot::channel();
    let status = build.status;
    tokio::spawn(async move {
        let code = status.wait().await;
        let _ = exit_tx.send((code, Instant::now()));
    });

    let mut syncer = Syncer {
        conn: conn.clone(),
        artifact_root: root.clone(),
        local_root: cfg.local_root.clone(),
        agent_argv: vec![cfg.agent_command.clone(), "agent".to_string(), root.clone()],
        block_size: cfg.block_size,
        jobs: cfg.sync_jobs,
        idle: Vec::new(),
        fallback: false,
        busy: Duration::ZERO,
    };
    let mut state = RunState {
        catalog,
        progress,
        started,
        prev: snapshot.files.iter().map(|(p, (s, m))| RemoteFileStat { path: p.clone(), size: *s, mtime: *m }).collect(),
        snapshot,
        handled: BTreeSet::new(),
        outcomes: Vec::new(),
        warned_unknown: BTreeSet::new(),
        build_exited: None,
    };

    let mut ticker = tokio::time::interval(cfg.poll_interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    ticker.tick().await;
    let exit = loop {
        tokio::select! {
            exit = &mut exit_rx => break exit,
            _ = ticker.tick() => {
                state.poll(conn.as_ref(), &root, &mut syncer).await;
            }
        }
    };
    let (code, exited_at) = match exit {
        Ok((code, at)) => (code, at),
        Err(_) => (Err(TransportError::Channel("build status lost".into())), Instant::now()),
    };
    state.build_exited = Some(exited_at);
    let build_duration = exited_at.duration_since(build_started);
    let exit_status = match code {
        Ok(c) => c,
        Err(e) => {
            progress.info(&format!("lost track of the remote build: {e}"));
            -1
        }
    };
    let _ = tokio::join!(out_task, err_task);
    progress.info(&format!("remote build finished with status {exit_status}"));

    for i in 0..FINAL_POLL_LIMIT {
        if i > 0 {
            tokio::time::sleep(cfg.poll_interval).await;
        }
        if !state.poll(conn.as_ref(), &root, &mut syncer).await {
            break;
        }
    }

    let mut missing = BTreeSet::new();
    if !req.incremental {
        match catalog.sync_set(&req.sessions, false, &BTreeSet::new()) {
            Ok(required) => {
                let synced_sessions: BTreeSet<String> = state.outcomes.iter().map(|o| o.session.clone()).collect();
                let mut extra = Vec::new();
                for s in required.sessions.iter().filter(|s| !synced_sessions.contains(*s)) {
                    let files: Vec<RemoteFileStat> = state
                        .prev
                        .iter()
                        .filter(|f| session_of(&f.path) == *s && !state.handled.contains(&f.path))
                        .cloned()
                        .collect();
                    if files.is_empty() {
                        missing.insert(s.clone());
                        progress.info(&format!("warning: no heap image of {s} under {root} on the remote host"));
                    }
                    extra.extend(files);
                }
                for f in &extra {
                    state.handled.insert(f.path.clone());
                }
                let results = syncer.sync_batch(extra, progress).await;
                state.record(results);
            }
            Err(e) => progress.info(&format!("warning: cannot compute ancestor sessions: {e}")),
        }
    }
    syncer.close().await;

    let mut per_session: BTreeMap<String, SessionOutcome> = BTreeMap::new();
    for o in &state.outcomes {
        let entry = per_session.entry(o.session.clone()).or_insert_with(|| SessionOutcome {
            synced: true,
            ..Default::default()
        });
        match &o.result {
            Ok(s) => {
                entry.stats.literal_bytes += s.literal_bytes;
                entry.stats.copied_bytes += s.copied_bytes;
                entry.stats.wire_bytes += s.wire_bytes;
                entry.stats.source_len += s.source_len;
                entry.stats.elapsed += s.elapsed;
                if !is_log_path(&o.remote_path) {
                    entry.stats.mtime = s.mtime;
                }
            }
            Err(e) => {
                entry.synced = false;
                entry.error.get_or_insert_with(|| e.clone());
            }
        }
    }
    for s in missing {
        per_session.insert(
            s,
            SessionOutcome {
                missing: true,
                error: Some("no heap image on the remote host".into()),
                ..Default::default()
            },
        );
    }
    let total_wire_bytes = state
        .outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok())
        .map(|s| s.wire_bytes)
        .sum();
    let report = BuildReport {
        exit_status,
        per_session,
        total_wire_bytes,
        build_duration,
        sync_duration: syncer.busy,
        build_exited_after: exited_at.duration_since(started),
        unknown_sessions: state.warned_unknown.iter().cloned().collect(),
        files: state.outcomes,
    };
    progress.detail(&format!(
        "{} files synced, {} failed, {} wire bytes, build {:.1} s, sync {:.1} s",
        report.synced_paths().len(),
        report.sync_failures(),
        report.total_wire_bytes,
        report.build_duration.as_secs_f64(),
        report.sync_duration.as_secs_f64()
    ));
    Ok(report)
}

fn is_log_path(path: &str) -> bool {
    path.starts_with("log/") || path.contains("/log/")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(sessions: &[&str], opts: &[&str], base: &str) -> BuildRequest {
        BuildRequest {
            sessions: sessions.iter().map(|s| s.to_string()).collect(),
            session_dirs: Vec::new(),
            remote: Endpoint::new("build1", 22, "u").unwrap(),
            remote_base: base.to_string(),
            remote_opts: opts.iter().map(|s| s.to_string()).collect(),
            incremental: false,
            proxy: None,
            verbose: false,
        }
    }

    fn stat(path: &str, size: u64, mtime: u64) -> RemoteFileStat {
        RemoteFileStat {
            path: path.into(),
            size,
            mtime,
        }
    }

    #[test]
    fn build_command_shapes() {
        assert_eq!(
            build_command(&req(&["CeTA"], &["-d$ISAFOR"], "~")),
            ["~/bin/isabelle", "build", "-b", "-d$ISAFOR", "CeTA"]
        );
        assert_eq!(
            build_command(&req(&["A"], &[], "/opt/isa")),
            ["/opt/isa/bin/isabelle", "build", "-b", "A"]
        );
        assert_eq!(
            build_command(&req(&["A", "B"], &["-d", "$ISAFOR", "-v"], "/opt/isa/")),
            ["/opt/isa/bin/isabelle", "build", "-b", "-d", "$ISAFOR", "-v", "A", "B"]
        );
    }

    #[test]
    fn artifact_root_defaults() {
        assert_eq!(default_artifact_root("~"), "~/heaps");
        assert_eq!(default_artifact_root("/opt/isa/"), "/opt/isa/heaps");
        assert_eq!(default_artifact_root("/"), "/heaps");
    }

    #[test]
    fn session_names_from_paths() {
        assert_eq!(session_of("HOL"), "HOL");
        assert_eq!(session_of("log/HOL.gz"), "HOL");
        assert_eq!(session_of("log/HOL-Library.db"), "HOL-Library");
        assert_eq!(session_of("polyml_x86_64/log/CeTA.gz"), "CeTA");
        assert_eq!(session_of("x86_64-linux/Pure.gz"), "Pure.gz");
        assert_eq!(session_of("log/.gz"), ".gz");
    }

    #[test]
    fn novelty_and_stability() {
        let snap = HeapSnapshot::from_listing(&[stat("A", 5, 100)]);
        // Unchanged snapshot member.
        assert!(detect_new_heaps(&snap, &[stat("A", 5, 100)], &[stat("A", 5, 100)]).is_empty());
        // New and identical in both listings.
        let got = detect_new_heaps(&snap, &[stat("B", 7, 200)], &[stat("B", 7, 200)]);
        assert_eq!(got.len(), 1);
        assert!(got[0].stable);
        assert_eq!(got[0].session, "B");
        // Growing between listings.
        let got = detect_new_heaps(&snap, &[stat("B", 7, 200)], &[stat("B", 9, 200)]);
        assert!(!got[0].stable);
        // Rewritten snapshot member with a new mtime only.
        let got = detect_new_heaps(&snap, &[stat("A", 5, 101)], &[stat("A", 5, 101)]);
        assert_eq!((got[0].remote_path.as_str(), got[0].stable), ("A", true));
        // First sighting is never stable.
        assert!(!detect_new_heaps(&snap, &[], &[stat("C", 1, 1)])[0].stable);
    }
}
