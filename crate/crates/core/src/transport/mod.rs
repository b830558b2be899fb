//! Remote session abstraction.
//!
//! A [`Connection`] runs shell command lines on the remote machine and hands
//! back their output as byte streams. Two implementations exist: [`ssh`] for
//! real hosts (optionally tunneled through a proxy) and [`loopback`], which
//! runs commands locally inside a sandbox directory posing as the remote home.

pub mod loopback;
pub mod ssh;

use std::fmt;
use std::pin::Pin;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite};
use tokio::sync::oneshot;

use crate::hostkeys::{KeyType, VerifyResult};

pub type BoxedRead = Pin<Box<dyn AsyncRead + Send>>;
pub type BoxedWrite = Pin<Box<dyn AsyncWrite + Send>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
    pub user: String,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16, user: impl Into<String>) -> Result<Self, TransportError> {
        let host = host.into();
        if host.is_empty() {
            return Err(TransportError::InvalidEndpoint("empty host name".into()));
        }
        if port == 0 {
            return Err(TransportError::InvalidEndpoint("port 0".into()));
        }
        Ok(Endpoint {
            host,
            port,
            user: user.into(),
        })
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.port == 22 {
            write!(f, "{}@{}", self.user, self.host)
        } else {
            write!(f, "{}@{}:{}", self.user, self.host, self.port)
        }
    }
}

pub const DEFAULT_FORWARD_PORT: u16 = 2222;

/// Jump host. The target's SSH daemon is forwarded to
/// `127.0.0.1:forward_port` through an SSH session to `host:ssh_port`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxySpec {
    pub host: String,
    pub forward_port: u16,
    pub ssh_port: u16,
}

impl ProxySpec {
    pub fn new(host: impl Into<String>) -> Self {
        ProxySpec {
            host: host.into(),
            forward_port: DEFAULT_FORWARD_PORT,
            ssh_port: 22,
        }
    }

    /// Parses `HOST` or `HOST:PORT`; `PORT` is the local forward port.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (host, port) = match spec.rsplit_once(':') {
            Some((h, p)) => {
                let port: u16 = p
                    .parse()
                    .ok()
                    .filter(|p| *p != 0)
                    .ok_or_else(|| format!("invalid proxy port `{p}`"))?;
                (h, port)
            }
            None => (spec, DEFAULT_FORWARD_PORT),
        };
        if host.is_empty() {
            return Err(format!("missing proxy host in `{spec}`"));
        }
        Ok(ProxySpec {
            host: host.to_string(),
            forward_port: port,
            ssh_port: 22,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Topology {
    Direct,
    Tunneled(ProxySpec),
    Loopback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Direct,
    Proxy,
    Target,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Direct => "remote host",
            Stage::Proxy => "proxy (stage 1)",
            Stage::Target => "remote host through proxy tunnel (stage 2)",
        })
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("host key verification failed for {host_pattern} at {stage}: {result}. {remedy}")]
    HostKey {
        stage: Stage,
        host_pattern: String,
        result: VerifyResult,
        presented: Option<KeyType>,
        remedy: String,
    },
    #[error(
        "key-based authentication as {user} on {host} failed ({detail}); \
         password authentication is not supported"
    )]
    Auth {
        stage: Stage,
        user: String,
        host: String,
        detail: String,
    },
    #[error("cannot connect to {target}: {detail}")]
    Connect { stage: Stage, target: String, detail: String },
    #[error("local forward port {0} is already in use")]
    PortInUse(u16),
    #[error("channel failure: {0}")]
    Channel(String),
}

impl TransportError {
    pub fn host_key_result(&self) -> Option<VerifyResult> {
        match self {
            TransportError::HostKey { result, .. } => Some(*result),
            _ => None,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            TransportError::HostKey { stage, .. }
            | TransportError::Auth { stage, .. }
            | TransportError::Connect { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Receives a process's exit status once it terminates.
pub struct ExitWatch(oneshot::Receiver<Result<i32, String>>);

impl ExitWatch {
    pub fn channel() -> (oneshot::Sender<Result<i32, String>>, ExitWatch) {
        let (tx, rx) = oneshot::channel();
        (tx, ExitWatch(rx))
    }

    /// A status that is already known.
    pub fn ready(status: i32) -> ExitWatch {
        let (tx, rx) = Self::channel();
        let _ = tx.send(Ok(status));
        rx
    }

    pub async fn wait(self) -> Result<i32, TransportError> {
        match self.0.await {
            Ok(Ok(code)) => Ok(code),
            Ok(Err(msg)) => Err(TransportError::Channel(msg)),
            Err(_) => Err(TransportError::Channel(
                "connection closed before the exit status arrived".into(),
            )),
        }
    }
}

/// A running remote command with streamed output.
pub struct ExecHandle {
    pub stdout: BoxedRead,
    pub stderr: BoxedRead,
    pub status: ExitWatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutput {
    pub status: i32,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

impl ExecHandle {
    /// Collects both streams to completion, then the exit status.
    pub async fn output(mut self) -> Result<ExecOutput, TransportError> {
        let mut stdout = Vec::new();
        let mut stderr = Vec::new();
        let (a, b) = tokio::join!(
            self.stdout.read_to_end(&mut stdout),
            self.stderr.read_to_end(&mut stderr)
        );
        a.map_err(|e| TransportError::Channel(e.to_string()))?;
        b.map_err(|e| TransportError::Channel(e.to_string()))?;
        let status = self.status.wait().await?;
        Ok(ExecOutput { status, stdout, stderr })
    }
}

/// Bidirectional byte stream attached to a remote process's stdin/stdout.
pub struct ByteChannel {
    pub reader: BoxedRead,
    pub writer: BoxedWrite,
    status: Option<ExitWatch>,
    stderr: Arc<Mutex<Vec<u8>>>,
}

const STDERR_KEEP: usize = 8 * 1024;

impl ByteChannel {
    /// Channel over arbitrary streams, with no process behind it.
    pub fn new<R, W>(reader: R, writer: W) -> Self
    where
        R: AsyncRead + Send + 'static,
        W: AsyncWrite + Send + 'static,
    {
        ByteChannel {
            reader: Box::pin(reader),
            writer: Box::pin(writer),
            status: None,
            stderr: Arc::default(),
        }
    }

    /// Wraps a process; its stderr is drained in the background and the
    /// last few kilobytes are kept for diagnostics.
    pub fn from_exec(handle: ExecHandle, stdin: BoxedWrite) -> Self {
        let stderr = Arc::new(Mutex::new(Vec::new()));
        let sink = stderr.clone();
        let mut err_stream = handle.stderr;
        tokio::spawn(async move {
            let mut buf = [0u8; 4096];
            loop {
                match err_stream.read(&mut buf).await {
                    Ok(0) | Err(_) => break,
                    Ok(n) => {
                        let mut s = sink.lock().unwrap();
                        s.extend_from_slice(&buf[..n]);
                        if s.len() > STDERR_KEEP {
                            let cut = s.len() - STDERR_KEEP;
                            s.drain(..cut);
                        }
                    }
                }
            }
        });
        ByteChannel {
            reader: handle.stdout,
            writer: stdin,
            status: Some(handle.status),
            stderr,
        }
    }

    pub fn stderr_tail(&self) -> String {
        String::from_utf8_lossy(&self.stderr.lock().unwrap()).trim().to_string()
    }

    pub fn take_status(&mut self) -> Option<ExitWatch> {
        self.status.take()
    }

    pub fn into_parts(self) -> (BoxedRead, BoxedWrite) {
        (self.reader, self.writer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RemoteFileStat {
    /// Path relative to the listed directory, `/`-separated.
    pub path: String,
    pub size: u64,
    /// Whole seconds since the epoch.
    pub mtime: u64,
}

#[async_trait]
pub trait Connection: Send + Sync {
    fn topology(&self) -> Topology;

    /// Runs a command line through the remote user's shell.
    async fn exec_shell(&self, command: &str) -> Result<(ExecHandle, BoxedWrite), TransportError>;

    async fn exec(&self, argv: &[String]) -> Result<ExecHandle, TransportError> {
        let (handle, mut stdin) = self.exec_shell(&shell_command(argv)).await?;
        use tokio::io::AsyncWriteExt;
        let _ = stdin.shutdown().await;
        Ok(handle)
    }

    async fn open_channel(&self, argv: &[String]) -> Result<ByteChannel, TransportError> {
        let (handle, stdin) = self.exec_shell(&shell_command(argv)).await?;
        Ok(ByteChannel::from_exec(handle, stdin))
    }

    /// Regular files below `dir`, recursively. A missing directory lists as
    /// empty.
    async fn stat_tree(&self, dir: &str) -> Result<Vec<RemoteFileStat>, TransportError> {
        let (handle, stdin) = self.exec_shell(&stat_tree_command(dir)).await?;
        drop(stdin);
        let output = handle.output().await?;
        if output.status != 0 {
            return Err(TransportError::Channel(format!(
                "remote listing of {dir} failed with status {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        parse_stat_listing(&output.stdout)
    }
}

/// Quotes one word for a POSIX shell. A leading `~` or `~/` is left bare so
/// the remote shell expands it.
pub fn shell_quote(word: &str) -> String {
    if word == "~" {
        return word.to_string();
    }
    if let Some(rest) = word.strip_prefix("~/") {
        return if rest.is_empty() {
            "~/".to_string()
        } else {
            format!("~/{}", quote_plain(rest))
        };
    }
    quote_plain(word)
}

fn quote_plain(word: &str) -> String {
    let safe = !word.is_empty()
        && word
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"_-./=:,@+%".contains(&b));
    if safe {
        word.to_string()
    } else {
        format!("'{}'", word.replace('\'', r"'\''"))
    }
}

pub fn shell_command(argv: &[String]) -> String {
    argv.iter().map(|w| shell_quote(w)).collect::<Vec<_>>().join(" ")
}

/// Shell snippet listing regular files below `dir` as NUL-terminated
/// `size mtime path` records, with `path` relative to `dir`.
pub fn stat_tree_command(dir: &str) -> String {
    format!(
        "cd {} 2>/dev/null || exit 0; exec find . -type f -printf '%s %T@ %P\\0'",
        shell_quote(dir)
    )
}

pub fn parse_stat_listing(raw: &[u8]) -> Result<Vec<RemoteFileStat>, TransportError> {
    let bad = |rec: &str| TransportError::Channel(format!("unparseable listing record `{rec}`"));
    let mut out = Vec::new();
    for rec in raw.split(|b| *b == 0).filter(|r| !r.is_empty()) {
        let rec = String::from_utf8_lossy(rec);
        let mut parts = rec.splitn(3, ' ');
        let (Some(size), Some(mtime), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(&rec));
        };
        let size: u64 = size.parse().map_err(|_| bad(&rec))?;
        let secs = mtime.split('.').next().unwrap_or("");
        let mtime: u64 = secs.parse().map_err(|_| bad(&rec))?;
        if path.is_empty() {
            return Err(bad(&rec));
        }
        out.push(RemoteFileStat {
            path: path.to_string(),
            size,
            mtime,
        });
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("CeTA"), "CeTA");
        assert_eq!(shell_quote("-d$ISAFOR"), "'-d$ISAFOR'");
        assert_eq!(shell_quote("~/bin/isabelle"), "~/bin/isabelle");
        assert_eq!(shell_quote("~/a b"), "~/'a b'");
        assert_eq!(shell_quote("~"), "~");
        assert_eq!(shell_quote("it's"), r"'it'\''s'");
        assert_eq!(shell_quote(""), "''");
        assert_eq!(shell_quote("~user"), "'~user'");
    }

    #[test]
    fn proxy_spec_parsing() {
        assert_eq!(ProxySpec::parse("proxy.uibk.ac.at").unwrap(), ProxySpec::new("proxy.uibk.ac.at"));
        let p = ProxySpec::parse("p:2022").unwrap();
        assert_eq!((p.host.as_str(), p.forward_port, p.ssh_port), ("p", 2022, 22));
        assert!(ProxySpec::parse("p:").is_err());
        assert!(ProxySpec::parse("p:0").is_err());
        assert!(ProxySpec::parse("p:70000").is_err());
        assert!(ProxySpec::parse(":22").is_err());
    }

    #[test]
    fn listing_parser() {
        let raw = b"5 1700000000.5000000000 A\0123 1700000001.0000000000 log/A.gz\0 7 1.0 with space\0";
        // A leading space makes the size field empty.
        assert!(parse_stat_listing(raw).is_err());
        let raw = b"5 1700000000.5000000000 A\0123 1700000001.0000000000 log/A.gz\07 1.0 with space\0";
        let l = parse_stat_listing(raw).unwrap();
        assert_eq!(l.len(), 3);
        assert_eq!(l[0], RemoteFileStat { path: "A".into(), size: 5, mtime: 1700000000 });
        assert_eq!(l[2].path, "with space");
        assert_eq!(l[2].mtime, 1);
        assert!(parse_stat_listing(b"").unwrap().is_empty());
    }

    #[test]
    fn endpoint_validation() {
        assert!(Endpoint::new("", 22, "u").is_err());
        assert!(Endpoint::new("h", 0, "u").is_err());
        assert_eq!(Endpoint::new("h", 2222, "u").unwrap().to_string(), "u@h:2222");
    }
}
