//! In-process stand-in for a remote host.
//!
//! Commands run through `sh -c` on the local machine with both the working
//! directory and `HOME` pointing at a sandbox directory, so `~` on the
//! "remote" side resolves into the sandbox exactly like it would on a real
//! host.

use std::path::{Path, PathBuf};
use std::process::Stdio;

use async_trait::async_trait;
use tokio::process::Command;

use super::{BoxedWrite, Connection, ExecHandle, ExitWatch, Topology, TransportError};

#[derive(Debug, Clone)]
pub struct LoopbackConnection {
    root: PathBuf,
    env: Vec<(String, String)>,
}

impl LoopbackConnection {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        LoopbackConnection {
            root: root.into(),
            env: Vec::new(),
        }
    }

    /// Extra environment for every command.
    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

#[cfg(unix)]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

#[cfg(not(unix))]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}

#[async_trait]
impl Connection for LoopbackConnection {
    fn topology(&self) -> Topology {
        Topology::Loopback
    }

    async fn exec_shell(&self, command: &str) -> Result<(ExecHandle, BoxedWrite), TransportError> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(command)
            .current_dir(&self.root)
            .env("HOME", &self.root)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for (k, v) in &self.env {
            cmd.env(k, v);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| TransportError::Channel(format!("cannot spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let (tx, status) = ExitWatch::channel();
        tokio::spawn(async move {
            let res = child.wait().await.map(exit_code).map_err(|e| e.to_string());
            let _ = tx.send(res);
        });
        Ok((
            ExecHandle {
                stdout: Box::pin(stdout),
                stderr: Box::pin(stderr),
                status,
            },
            Box::pin(stdin),
        ))
    }
}
