//! Sender half of the sync protocol, run on the remote machine as
//! `remote_build agent <root_dir>` with its stdio attached to a channel.

use std::fs::File;
use std::io::{self, BufReader};
use std::path::Path;
use std::time::UNIX_EPOCH;

use log::debug;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::sync::mpsc;

use super::delta::{encode_delta, DeltaOp};
use super::signature::{block_count, check_block_size, BlockSignature, SignatureSet};
use super::wire::{Frame, FramedStream};
use super::{is_safe_relative_path, SyncError};

const OP_QUEUE: usize = 64;

/// Serves file requests until the peer sends `Quit` or closes the stream.
///
/// A request for a missing file is answered with an `Error` frame and the
/// loop continues. Protocol violations are answered with an `Error` frame
/// and end the session with an error.
pub async fn serve_agent<R, W>(reader: R, writer: W, root: &Path) -> Result<(), SyncError>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut stream = FramedStream::new(reader, writer);
    stream.greet().await?;
    loop {
        let frame = match stream.recv().await {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) => return fail(&mut stream, e.to_string(), e.into()).await,
        };
        match frame {
            Frame::Quit => {
                stream.shutdown().await?;
                return Ok(());
            }
            Frame::FileRequest { path, block_size } => {
                let sigs = match read_signatures(&mut stream, block_size).await {
                    Ok(s) => s,
                    Err(e) => return fail(&mut stream, e.to_string(), e).await,
                };
                if !is_safe_relative_path(&path) {
                    let e = SyncError::InvalidPath(path);
                    return fail(&mut stream, e.to_string(), e).await;
                }
                serve_file(&mut stream, root, &path, sigs).await?;
            }
            other => {
                let e = SyncError::Unexpected {
                    expected: "FileRequest",
                    got: other.name(),
                };
                return fail(&mut stream, e.to_string(), e).await;
            }
        }
    }
}

async fn fail<R, W>(stream: &mut FramedStream<R, W>, reason: String, err: SyncError) -> Result<(), SyncError>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let _ = stream.send(&Frame::Error(reason)).await;
    let _ = stream.shutdown().await;
    Err(err)
}

async fn read_signatures<R, W>(stream: &mut FramedStream<R, W>, block_size: u32) -> Result<SignatureSet, SyncError>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    check_block_size(block_size)?;
    let (basis_len, sig_count) = match stream.recv().await? {
        Some(Frame::SigHeader { basis_len, sig_count }) => (basis_len, sig_count),
        other => return Err(unexpected("SigHeader", other)),
    };
    if sig_count != block_count(basis_len, block_size) {
        return Err(SyncError::Remote(format!(
            "signature count {sig_count} does not fit a {basis_len}-byte basis"
        )));
    }
    let mut set = SignatureSet::empty(block_size);
    set.basis_len = basis_len;
    set.signatures.reserve(sig_count.min(1 << 20) as usize);
    for index in 0..sig_count {
        match stream.recv().await? {
            Some(Frame::Sig { weak, strong }) => set.signatures.push(BlockSignature { index, weak, strong }),
            other => return Err(unexpected("Sig", other)),
        }
    }
    Ok(set)
}

fn unexpected(expected: &'static str, got: Option<Frame>) -> SyncError {
    SyncError::Unexpected {
        expected,
        got: got.as_ref().map_or("end of stream", Frame::name),
    }
}

fn mtime_seconds(meta: &std::fs::Metadata) -> u64 {
    meta.modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_secs())
}

async fn serve_file<R, W>(
    stream: &mut FramedStream<R, W>,
    root: &Path,
    path: &str,
    sigs: SignatureSet,
) -> Result<(), SyncError>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let full = root.join(path);
    let opened = File::open(&full).and_then(|f| {
        let meta = f.metadata()?;
        if meta.is_file() {
            Ok((f, mtime_seconds(&meta)))
        } else {
            Err(io::Error::new(io::ErrorKind::NotFound, "not a regular file"))
        }
    });
    let (file, mtime) = match opened {
        Ok(x) => x,
        Err(e) => {
            let reason = if e.kind() == io::ErrorKind::NotFound {
                format!("no such file: {path}")
            } else {
                format!("cannot open {path}: {e}")
            };
            stream.send(&Frame::Error(reason)).await?;
            stream.flush().await?;
            return Ok(());
        }
    };
    debug!("serving {path} against {} signatures", sigs.signatures.len());

    let (tx, mut rx) = mpsc::channel::<DeltaOp>(OP_QUEUE);
    let encoder = tokio::task::spawn_blocking(move || {
        encode_delta(BufReader::new(file), &sigs, |op| {
            tx.blocking_send(op)
                .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "delta consumer went away"))
        })
    });
    let mut send_err = None;
    while let Some(op) = rx.recv().await {
        let frame = match op {
            DeltaOp::Copy(index) => Frame::Copy { index },
            DeltaOp::Literal(bytes) => Frame::Literal(bytes),
        };
        if let Err(e) = stream.send(&frame).await {
            send_err = Some(e);
            break;
        }
    }
    drop(rx);
    let summary = encoder
        .await
        .map_err(|e| SyncError::Remote(format!("delta encoder panicked: {e}")))?;
    if let Some(e) = send_err {
        return Err(e.into());
    }
    match summary {
        Ok(s) => {
            stream
                .send(&Frame::FileEnd {
                    source_len: s.source_len,
                    mtime,
                    digest: s.source_digest,
                })
                .await?;
        }
        Err(e) => {
            stream.send(&Frame::Error(format!("reading {path} failed: {e}"))).await?;
        }
    }
    stream.flush().await?;
    Ok(())
}
