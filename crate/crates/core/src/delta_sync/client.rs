//! Receiver half of the sync protocol and the atomic local install.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use filetime::FileTime;
use log::{debug, warn};
use tempfile::NamedTempFile;
use tokio::io::AsyncReadExt;
use tokio::sync::mpsc;

use super::checksum::StrongDigest;
use super::delta::{DeltaApplier, DeltaOp};
use super::signature::{block_signatures, check_block_size, SignatureSet};
use super::wire::{Frame, FramedStream, WireError};
use super::{is_safe_relative_path, SyncError};
use crate::transport::{BoxedRead, BoxedWrite, ByteChannel, Connection, RemoteFileStat};

/// Marker in the names of in-flight temp files.
const TEMP_MARKER: &str = ".rbsync-";
const OP_QUEUE: usize = 64;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncStats {
    pub literal_bytes: u64,
    pub copied_bytes: u64,
    pub wire_bytes: u64,
    pub elapsed: Duration,
    pub source_len: u64,
    pub mtime: u64,
}

pub struct AgentClient {
    stream: FramedStream<BoxedRead, BoxedWrite>,
    stderr: Option<ByteChannel>,
    /// Set once the framing is out of step; the session is unusable then.
    poisoned: bool,
}

impl AgentClient {
    /// Exchanges greetings with the agent at the other end of `channel`.
    pub async fn connect(channel: ByteChannel) -> Result<AgentClient, SyncError> {
        let mut channel = channel;
        let status = channel.take_status();
        let reader = std::mem::replace(&mut channel.reader, Box::pin(tokio::io::empty()));
        let writer = std::mem::replace(&mut channel.writer, Box::pin(tokio::io::sink()));
        let mut stream = FramedStream::new(reader, writer);
        match stream.greet().await {
            Ok(()) => Ok(AgentClient {
                stream,
                stderr: Some(channel),
                poisoned: false,
            }),
            Err(e @ (WireError::NoGreeting | WireError::BadMagic(_) | WireError::Truncated | WireError::Io(_))) => {
                let mut detail = e.to_string();
                if let Some(status) = status {
                    if let Ok(Ok(code)) = tokio::time::timeout(Duration::from_secs(2), status.wait()).await {
                        detail = format!("agent exited with status {code}");
                    }
                }
                let tail = channel.stderr_tail();
                if !tail.is_empty() {
                    detail = format!("{detail}: {tail}");
                }
                Err(SyncError::AgentUnavailable(detail))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Whatever the agent process wrote to stderr recently.
    pub fn stderr_tail(&self) -> String {
        self.stderr.as_ref().map(|c| c.stderr_tail()).unwrap_or_default()
    }

    pub fn is_usable(&self) -> bool {
        !self.poisoned
    }

    /// Brings `local_path` up to date with `remote_path` (relative to the
    /// agent's root). On any failure the previous local file is untouched.
    pub async fn sync_file(
        &mut self,
        remote_path: &str,
        local_path: &Path,
        block_size: u32,
    ) -> Result<SyncStats, SyncError> {
        if self.poisoned {
            return Err(SyncError::AgentUnavailable("session broken by an earlier error".into()));
        }
        let res = self.exchange(remote_path, local_path, block_size).await;
        if let Err(SyncError::Wire(_) | SyncError::Unexpected { .. }) = &res {
            self.poisoned = true;
        }
        res
    }

    async fn exchange(&mut self, remote_path: &str, local_path: &Path, block_size: u32) -> Result<SyncStats, SyncError> {
        check_block_size(block_size)?;
        if !is_safe_relative_path(remote_path) {
            return Err(SyncError::InvalidPath(remote_path.to_string()));
        }
        let started = Instant::now();
        let wire_before = self.stream.wire_bytes();

        let sigs = {
            let local = local_path.to_path_buf();
            tokio::task::spawn_blocking(move || local_signatures(&local, block_size))
                .await
                .map_err(|e| io::Error::other(e.to_string()))??
        };
        self.stream
            .send(&Frame::FileRequest {
                path: remote_path.to_string(),
                block_size,
            })
            .await?;
        self.stream
            .send(&Frame::SigHeader {
                basis_len: sigs.basis_len,
                sig_count: sigs.signatures.len() as u64,
            })
            .await?;
        for s in &sigs.signatures {
            self.stream
                .send(&Frame::Sig {
                    weak: s.weak,
                    strong: s.strong,
                })
                .await?;
        }
        self.stream.flush().await?;

        let (tx, rx) = mpsc::channel::<Installer>(OP_QUEUE);
        let target = local_path.to_path_buf();
        let has_basis = sigs.basis_len > 0;
        let writer = tokio::task::spawn_blocking(move || install_from_ops(&target, has_basis, block_size, rx));

        let received = self.receive_ops(&tx).await;
        drop(tx);
        let installed = writer.await.map_err(|e| io::Error::other(e.to_string()))?;
        let ((source_len, mtime), (literal_bytes, copied_bytes)) = match (received, installed) {
            (Ok(Some(end)), Ok(counts)) => (end, counts),
            (Err(e), _) | (Ok(_), Err(e)) => return Err(e),
            (Ok(None), Ok(_)) => unreachable!("installer stopped without an error"),
        };
        let stats = SyncStats {
            literal_bytes,
            copied_bytes,
            wire_bytes: self.stream.wire_bytes() - wire_before,
            elapsed: started.elapsed(),
            source_len,
            mtime,
        };
        debug!("synced {remote_path}: {stats:?}");
        Ok(stats)
    }

    /// Forwards ops to the installer until `FileEnd`. Returns `None` if the
    /// installer stopped early; the rest of the file is then read and
    /// discarded so the session stays in step.
    async fn receive_ops(&mut self, tx: &mpsc::Sender<Installer>) -> Result<Option<(u64, u64)>, SyncError> {
        let mut installer_alive = true;
        loop {
            let msg = match self.stream.recv().await? {
                Some(Frame::Copy { index }) => Installer::Op(DeltaOp::Copy(index)),
                Some(Frame::Literal(bytes)) => Installer::Op(DeltaOp::Literal(bytes)),
                Some(Frame::FileEnd {
                    source_len,
                    mtime,
                    digest,
                }) => {
                    if !installer_alive {
                        return Ok(None);
                    }
                    let end = Installer::End {
                        source_len,
                        mtime,
                        digest,
                    };
                    return Ok(tx.send(end).await.ok().map(|_| (source_len, mtime)));
                }
                Some(Frame::Error(reason)) => return Err(SyncError::Remote(reason)),
                Some(other) => {
                    return Err(SyncError::Unexpected {
                        expected: "Copy, Literal or FileEnd",
                        got: other.name(),
                    })
                }
                None => return Err(WireError::Truncated.into()),
            };
            if installer_alive && tx.send(msg).await.is_err() {
                installer_alive = false;
            }
        }
    }

    /// Ends the session politely.
    pub async fn quit(mut self) -> Result<(), SyncError> {
        self.stream.send(&Frame::Quit).await?;
        self.stream.shutdown().await?;
        Ok(())
    }
}

/// One-shot convenience: greet, sync one file, quit.
pub async fn sync_file(
    channel: ByteChannel,
    remote_path: &str,
    local_path: &Path,
    block_size: u32,
) -> Result<SyncStats, SyncError> {
    let mut client = AgentClient::connect(channel).await?;
    let greet_bytes = client.stream.wire_bytes();
    let mut stats = client.sync_file(remote_path, local_path, block_size).await?;
    let _ = client.quit().await;
    stats.wire_bytes += greet_bytes + 5;
    Ok(stats)
}

enum Installer {
    Op(DeltaOp),
    End {
        source_len: u64,
        mtime: u64,
        digest: StrongDigest,
    },
}

fn local_signatures(path: &Path, block_size: u32) -> Result<SignatureSet, SyncError> {
    match File::open(path) {
        Ok(f) => Ok(block_signatures(BufReader::new(f), block_size)?),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(SignatureSet::empty(block_size)),
        Err(e) => Err(e.into()),
    }
}

/// Creates the temp sibling that will replace `target`.
fn temp_sibling(target: &Path) -> io::Result<NamedTempFile> {
    let dir = target.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tempfile::Builder::new()
        .prefix(&format!(".{name}{TEMP_MARKER}"))
        .suffix(".tmp")
        .tempfile_in(dir)
}

/// Renames `temp` over `target` after stamping `mtime` and matching the
/// permissions of the file being replaced (or 0644 for a new one).
fn install(temp: NamedTempFile, target: &Path, mtime: u64) -> io::Result<()> {
    match fs::metadata(target) {
        Ok(meta) => fs::set_permissions(temp.path(), meta.permissions())?,
        Err(_) => {
            #[cfg(unix)]
            {
                use std::os::unix::fs::PermissionsExt;
                fs::set_permissions(temp.path(), fs::Permissions::from_mode(0o644))?;
            }
        }
    }
    filetime::set_file_mtime(temp.path(), FileTime::from_unix_time(mtime as i64, 0))?;
    temp.persist(target).map_err(|e| e.error)?;
    Ok(())
}

fn install_from_ops(
    target: &Path,
    has_basis: bool,
    block_size: u32,
    mut rx: mpsc::Receiver<Installer>,
) -> Result<(u64, u64), SyncError> {
    let temp = temp_sibling(target)?;
    let basis = if has_basis { Some(File::open(target)?) } else { None };
    let out = BufWriter::new(temp.reopen()?);
    let mut applier = DeltaApplier::new(basis, block_size, out)?;
    while let Some(msg) = rx.blocking_recv() {
        match msg {
            Installer::Op(op) => applier.apply(&op)?,
            Installer::End {
                source_len,
                mtime,
                digest,
            } => {
                let (lit, copied) = (applier.literal_bytes(), applier.copied_bytes());
                let out = applier.finish(source_len, &digest)?;
                let file = out.into_inner().map_err(|e| e.into_error())?;
                file.sync_all()?;
                drop(file);
                install(temp, target, mtime)?;
                return Ok((lit, copied));
            }
        }
    }
    Err(SyncError::Transfer {
        path: target.display().to_string(),
        detail: "transfer interrupted before the end of the file".into(),
    })
}

/// Copies a remote file verbatim with `cat`, for hosts without the agent.
/// `remote_root` is passed to the remote shell, so a leading `~/` expands
/// there.
pub async fn fetch_full(
    conn: &dyn Connection,
    remote_root: &str,
    stat: &RemoteFileStat,
    local_path: &Path,
) -> Result<SyncStats, SyncError> {
    if !is_safe_relative_path(&stat.path) {
        return Err(SyncError::InvalidPath(stat.path.clone()));
    }
    let started = Instant::now();
    let remote = format!("{}/{}", remote_root.trim_end_matches('/'), stat.path);
    let handle = conn.exec(&["cat".to_string(), "--".to_string(), remote.clone()]).await?;
    let mut stdout = handle.stdout;
    let mut stderr = handle.stderr;
    let status = handle.status;

    let temp = temp_sibling(local_path)?;
    let mut out = BufWriter::new(temp.reopen()?);
    let mut buf = vec![0u8; 256 * 1024];
    let mut total = 0u64;
    let mut err_text = Vec::new();
    let drain_err = stderr.read_to_end(&mut err_text);
    let copy = async {
        loop {
            let n = stdout.read(&mut buf).await?;
            if n == 0 {
                break;
            }
            out.write_all(&buf[..n])?;
            total += n as u64;
        }
        out.flush()?;
        io::Result::Ok(())
    };
    let (copied, _) = tokio::join!(copy, drain_err);
    copied?;
    let code = status.wait().await?;
    if code != 0 {
        return Err(SyncError::Transfer {
            path: remote,
            detail: format!(
                "cat exited with status {code}: {}",
                String::from_utf8_lossy(&err_text).trim()
            ),
        });
    }
    let file = out.into_inner().map_err(|e| e.into_error())?;
    file.sync_all()?;
    drop(file);
    install(temp, local_path, stat.mtime)?;
    Ok(SyncStats {
        literal_bytes: total,
        copied_bytes: 0,
        wire_bytes: total,
        elapsed: started.elapsed(),
        source_len: total,
        mtime: stat.mtime,
    })
}

pub fn is_temp_file_name(name: &str) -> bool {
    name.starts_with('.') && name.contains(TEMP_MARKER) && name.ends_with(".tmp")
}

/// Removes temp files left behind by an interrupted earlier run. Returns the
/// removed paths.
pub fn cleanup_temp_files(root: &Path) -> io::Result<Vec<PathBuf>> {
    let mut removed = Vec::new();
    let mut dirs = vec![root.to_path_buf()];
    while let Some(dir) = dirs.pop() {
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            let ty = entry.file_type()?;
            if ty.is_dir() {
                dirs.push(entry.path());
            } else if ty.is_file() && is_temp_file_name(&entry.file_name().to_string_lossy()) {
                match fs::remove_file(entry.path()) {
                    Ok(()) => removed.push(entry.path()),
                    Err(e) => warn!("cannot remove stale {}: {e}", entry.path().display()),
                }
            }
        }
    }
    Ok(removed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temp_names_are_recognized() {
        let dir = tempfile::tempdir().unwrap();
        let t = temp_sibling(&dir.path().join("HOL")).unwrap();
        let name = t.path().file_name().unwrap().to_string_lossy().into_owned();
        assert!(is_temp_file_name(&name), "{name}");
        assert!(!is_temp_file_name("HOL"));
        assert!(!is_temp_file_name(".hidden"));
    }

    #[test]
    fn cleanup_removes_only_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("log")).unwrap();
        fs::write(dir.path().join("A"), b"a").unwrap();
        fs::write(dir.path().join("log/.A.gz.rbsync-x1.tmp"), b"junk").unwrap();
        fs::write(dir.path().join(".B.rbsync-y2.tmp"), b"junk").unwrap();
        let removed = cleanup_temp_files(dir.path()).unwrap();
        assert_eq!(removed.len(), 2);
        assert!(dir.path().join("A").exists());
        assert!(cleanup_temp_files(&dir.path().join("missing")).unwrap().is_empty());
    }

    #[test]
    fn install_sets_mtime() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("H");
        let mut t = temp_sibling(&target).unwrap();
        t.write_all(b"heap").unwrap();
        install(t, &target, 1_600_000_000).unwrap();
        let meta = fs::metadata(&target).unwrap();
        assert_eq!(FileTime::from_last_modification_time(&meta).unix_seconds(), 1_600_000_000);
        assert_eq!(fs::read(&target).unwrap(), b"heap");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
