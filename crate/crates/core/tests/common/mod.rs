//! Fixtures shared by the integration tests: sandboxed "remote" homes, fake
//! builders, ssh-keygen keys, a recording host-key store and a small
//! in-process SSH server that runs exec requests through `sh -c`.

#![allow(dead_code)]

pub mod faults;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command as StdCommand, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use filetime::FileTime;
use remote_build::hostkeys::{HostKeyStore, KnownHosts, KnownHostsEntry};
use russh::keys::{load_secret_key, PrivateKey, PublicKey};
use russh::server::{self, Auth, ChannelOpenHandle, Msg, Session};
use russh::{Channel, ChannelId, ChannelMsg, ChannelOpenFailure};
use tempfile::TempDir;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::process::Command;
use tokio::task::JoinHandle;

pub fn agent_binary() -> &'static str {
    env!("CARGO_BIN_EXE_remote_build")
}

/// A temporary tree with a remote home (`remote/`), a local heap directory
/// (`local/`) and a session catalog directory (`catalog/`).
pub struct Sandbox {
    pub dir: TempDir,
}

impl Sandbox {
    pub fn new() -> Sandbox {
        let dir = tempfile::Builder::new().prefix("rb-sandbox").tempdir().unwrap();
        for sub in ["remote/heaps", "local", "catalog"] {
            fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        Sandbox { dir }
    }

    pub fn remote(&self) -> PathBuf {
        self.dir.path().join("remote")
    }

    pub fn remote_heaps(&self) -> PathBuf {
        self.remote().join("heaps")
    }

    pub fn local(&self) -> PathBuf {
        self.dir.path().join("local")
    }

    pub fn catalog(&self) -> PathBuf {
        self.dir.path().join("catalog")
    }

    pub fn write_catalog(&self, text: &str) {
        fs::write(self.catalog().join("CATALOG"), text).unwrap();
    }

    /// Installs `script` as the remote `bin/isabelle`.
    pub fn write_builder(&self, script: &str) {
        let bin = self.remote().join("bin");
        fs::create_dir_all(&bin).unwrap();
        let path = bin.join("isabelle");
        fs::write(&path, script).unwrap();
        fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    }

    pub fn write_remote_heap(&self, rel: &str, data: &[u8], mtime: i64) {
        let path = self.remote_heaps().join(rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, data).unwrap();
        set_mtime(&path, mtime);
    }
}

pub fn set_mtime(path: &Path, secs: i64) {
    filetime::set_file_mtime(path, FileTime::from_unix_time(secs, 0)).unwrap();
}

pub fn mtime_of(path: &Path) -> i64 {
    FileTime::from_last_modification_time(&fs::metadata(path).unwrap()).unix_seconds()
}

/// Regular files below `root` whose names look like sync temp files.
pub fn temp_files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if e.file_name().to_string_lossy().contains(".rbsync-") {
                out.push(p);
            }
        }
    }
    out
}

pub fn args(a: &[&str]) -> Vec<String> {
    a.iter().map(|s| s.to_string()).collect()
}

pub fn env_of(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Deterministic pseudo-random bytes.
pub fn noise(len: usize, seed: u64) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    Rsa,
    Ecdsa,
    Ed25519,
}

/// Generates a key with ssh-keygen and returns the private key path.
pub fn keygen(dir: &Path, name: &str, kind: KeyKind) -> PathBuf {
    let path = dir.join(name);
    let mut cmd = StdCommand::new("ssh-keygen");
    cmd.args(["-q", "-N", "", "-C", name, "-f"]).arg(&path);
    match kind {
        KeyKind::Rsa => cmd.args(["-t", "rsa", "-b", "2048"]),
        KeyKind::Ecdsa => cmd.args(["-t", "ecdsa", "-b", "256"]),
        KeyKind::Ed25519 => cmd.args(["-t", "ed25519"]),
    };
    let status = cmd.stdin(Stdio::null()).status().expect("ssh-keygen runs");
    assert!(status.success(), "ssh-keygen failed for {name}");
    path
}

pub fn load_key(path: &Path) -> PrivateKey {
    load_secret_key(path, None).unwrap()
}

/// `pattern keytype base64` line for a known_hosts file.
pub fn known_hosts_line(pattern: &str, key: &PublicKey) -> String {
    let openssh = key.to_openssh().unwrap();
    let mut parts = openssh.split_whitespace();
    let ty = parts.next().unwrap();
    let b64 = parts.next().unwrap();
    format!("{pattern} {ty} {b64}")
}

/// Known-hosts store that records every lookup.
pub struct RecordingStore {
    inner: KnownHosts,
    pub lookups: Mutex<Vec<(String, u16)>>,
}

impl RecordingStore {
    pub fn new(known_hosts_text: &str) -> Arc<RecordingStore> {
        Arc::new(RecordingStore {
            inner: KnownHosts::parse(known_hosts_text),
            lookups: Mutex::new(Vec::new()),
        })
    }

    pub fn lookups(&self) -> Vec<(String, u16)> {
        self.lookups.lock().unwrap().clone()
    }
}

impl HostKeyStore for RecordingStore {
    fn lookup(&self, host: &str, port: u16) -> Vec<KnownHostsEntry> {
        self.lookups.lock().unwrap().push((host.to_string(), port));
        self.inner.lookup(host, port)
    }
}

#[derive(Clone)]
struct ShellServer {
    root: PathBuf,
    authorized: Option<PublicKey>,
    opened: Arc<Mutex<HashMap<ChannelId, Channel<Msg>>>>,
    commands: Arc<Mutex<Vec<String>>>,
    forwards: Arc<Mutex<Vec<(String, u32)>>>,
}

impl server::Handler for ShellServer {
    type Error = russh::Error;

    async fn auth_publickey(&mut self, _user: &str, key: &PublicKey) -> Result<Auth, Self::Error> {
        match &self.authorized {
            Some(k) if k.key_data() != key.key_data() => Ok(Auth::reject()),
            _ => Ok(Auth::Accept),
        }
    }

    async fn channel_open_session(
        &mut self,
        channel: Channel<Msg>,
        reply: ChannelOpenHandle,
        _session: &mut Session,
    ) -> Result<(), Self::Error> {
        self.opened.lock().unwrap().insert(channel.id(), channel);
        reply.accept().await;
        Ok(())
    }

    async fn exec_request(&mut self, id: ChannelId, data: &[u8], session: &mut Session) -> Result<(), Self::Error> {
        let command = String::from_utf8_lossy(data).into_owned();
        self.commands.lock().unwrap().push(command.clone());
        let Some(channel) = self.opened.lock().unwrap().remove(&id) else {
            session.channel_failure(id)?;
            return Ok(());
        };
        session.channel_success(id)?;
        tokio::spawn(run_command(channel, command, self.root.clone()));
        Ok(())
    }

    async fn channel_open_direct_tcpip(
        &mut self,
        channel: Channel<Msg>,
        host: &str,
        port: u32,
        _originator_address: &str,
        _originator_port: u32,
        reply: ChannelOpenHandle,
        _session: &mut Session,
    ) -> Result<(), Self::Error> {
        self.forwards.lock().unwrap().push((host.to_string(), port));
        match TcpStream::connect((host, port as u16)).await {
            Ok(mut socket) => {
                reply.accept().await;
                tokio::spawn(async move {
                    let mut stream = channel.into_stream();
                    let _ = tokio::io::copy_bidirectional(&mut socket, &mut stream).await;
                });
            }
            Err(_) => reply.reject(ChannelOpenFailure::ConnectFailed).await,
        }
        Ok(())
    }
}

async fn run_command(channel: Channel<Msg>, command: String, root: PathBuf) {
    let (mut read_half, write_half) = channel.split();
    let spawned = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .current_dir(&root)
        .env("HOME", &root)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .kill_on_drop(true)
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => {
            let _ = write_half.extended_data_bytes(1, format!("spawn failed: {e}\n").into_bytes()).await;
            let _ = write_half.exit_status(127).await;
            let _ = write_half.eof().await;
            let _ = write_half.close().await;
            return;
        }
    };
    let mut stdin = child.stdin.take();
    let input = tokio::spawn(async move {
        while let Some(msg) = read_half.wait().await {
            match msg {
                ChannelMsg::Data { data } => {
                    if let Some(s) = stdin.as_mut() {
                        if s.write_all(&data).await.is_err() {
                            stdin = None;
                        }
                    }
                }
                ChannelMsg::Eof => stdin = None,
                _ => {}
            }
        }
    });
    let mut stdout = child.stdout.take().unwrap();
    let mut stderr = child.stderr.take().unwrap();
    let mut out_writer = write_half.make_writer();
    let mut err_writer = write_half.make_writer_ext(Some(1));
    let pump_out = async {
        let mut buf = vec![0u8; 32 * 1024];
        loop {
            match stdout.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if out_writer.write_all(&buf[..n]).await.is_err() {
                        break;
                    }
                }
            }
        }
        let _ = out_writer.flush().await;
    };
    let pump_err = async {
        let _ = tokio::io::copy(&mut stderr, &mut err_writer).await;
        let _ = err_writer.flush().await;
    };
    tokio::join!(pump_out, pump_err);
    let code = match child.wait().await {
        Ok(s) => {
            use std::os::unix::process::ExitStatusExt;
            s.code().unwrap_or_else(|| 128 + s.signal().unwrap_or(0))
        }
        Err(_) => 255,
    };
    let _ = write_half.exit_status(code as u32).await;
    let _ = write_half.eof().await;
    let _ = write_half.close().await;
    input.abort();
}

/// SSH server on `127.0.0.1:<random port>` whose exec requests run with
/// `root` as working directory and home.
pub struct TestSshServer {
    pub addr: SocketAddr,
    commands: Arc<Mutex<Vec<String>>>,
    forwards: Arc<Mutex<Vec<(String, u32)>>>,
    task: JoinHandle<()>,
}

impl TestSshServer {
    pub async fn start(host_key: PrivateKey, root: &Path, authorized: Option<PublicKey>) -> TestSshServer {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        Self::start_on(listener, host_key, root, authorized)
    }

    pub fn start_on(listener: TcpListener, host_key: PrivateKey, root: &Path, authorized: Option<PublicKey>) -> TestSshServer {
        let addr = listener.local_addr().unwrap();
        let mut config = server::Config::default();
        config.keys = vec![host_key];
        config.inactivity_timeout = None;
        config.auth_rejection_time = Duration::from_millis(5);
        config.auth_rejection_time_initial = Some(Duration::ZERO);
        let config = Arc::new(config);
        let proto = ShellServer {
            root: root.to_path_buf(),
            authorized,
            opened: Arc::default(),
            commands: Arc::default(),
            forwards: Arc::default(),
        };
        let commands = proto.commands.clone();
        let forwards = proto.forwards.clone();
        let task = tokio::spawn(async move {
            loop {
                let Ok((socket, _)) = listener.accept().await else { return };
                let handler = ShellServer {
                    opened: Arc::default(),
                    ..proto.clone()
                };
                let config = config.clone();
                tokio::spawn(async move {
                    if let Ok(session) = server::run_stream(config, socket, handler).await {
                        let _ = session.await;
                    }
                });
            }
        });
        TestSshServer {
            addr,
            commands,
            forwards,
            task,
        }
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn commands(&self) -> Vec<String> {
        self.commands.lock().unwrap().clone()
    }

    pub fn forwards(&self) -> Vec<(String, u32)> {
        self.forwards.lock().unwrap().clone()
    }
}

impl Drop for TestSshServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Keys for one SSH test setup: an RSA and an ECDSA host key, a second RSA
/// key that matches nothing, and an RSA client identity.
pub struct Keys {
    pub dir: TempDir,
    pub host_rsa: PathBuf,
    pub host_ecdsa: PathBuf,
    pub other_rsa: PathBuf,
    pub client: PathBuf,
}

impl Keys {
    pub fn generate() -> Keys {
        let dir = tempfile::tempdir().unwrap();
        Keys {
            host_rsa: keygen(dir.path(), "host_rsa", KeyKind::Rsa),
            host_ecdsa: keygen(dir.path(), "host_ecdsa", KeyKind::Ecdsa),
            other_rsa: keygen(dir.path(), "other_rsa", KeyKind::Rsa),
            client: keygen(dir.path(), "client", KeyKind::Ed25519),
            dir,
        }
    }

    pub fn public(path: &Path) -> PublicKey {
        load_key(path).public_key().clone()
    }

    pub fn ssh_options(&self) -> remote_build::transport::ssh::SshOptions {
        remote_build::transport::ssh::SshOptions {
            identity_files: vec![self.client.clone()],
            use_agent: false,
            connect_timeout: Duration::from_secs(20),
        }
    }
}
