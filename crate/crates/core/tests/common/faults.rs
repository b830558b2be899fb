//! Stream wrappers that fail after a byte budget.

use std::io;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll};

use tokio::io::{AsyncRead, AsyncWrite, ReadBuf};
use tokio::sync::Notify;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The peer's end of the stream closes.
    Eof,
    /// The connection resets.
    Reset,
    /// The stream stops delivering and signals the notifier, so the test can
    /// kill the sync while it is blocked mid-transfer.
    Stall,
}

/// Passes through at most `budget` bytes, then misbehaves as `fault`.
pub struct FaultyReader<R> {
    inner: R,
    remaining: u64,
    fault: Fault,
    pub stalled: Arc<Notify>,
    pub seen: Arc<AtomicU64>,
}

impl<R> FaultyReader<R> {
    pub fn new(inner: R, budget: u64, fault: Fault) -> Self {
        FaultyReader {
            inner,
            remaining: budget,
            fault,
            stalled: Arc::new(Notify::new()),
            seen: Arc::new(AtomicU64::new(0)),
        }
    }
}

impl<R: AsyncRead + Unpin> AsyncRead for FaultyReader<R> {
    fn poll_read(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &mut ReadBuf<'_>) -> Poll<io::Result<()>> {
        if self.remaining == 0 {
            return match self.fault {
                Fault::Eof => Poll::Ready(Ok(())),
                Fault::Reset => Poll::Ready(Err(io::Error::new(io::ErrorKind::ConnectionReset, "injected reset"))),
                Fault::Stall => {
                    self.stalled.notify_one();
                    Poll::Pending
                }
            };
        }
        let cap = buf.remaining().min(self.remaining as usize);
        let mut bounce = vec![0u8; cap];
        let mut limited = ReadBuf::new(&mut bounce);
        let res = Pin::new(&mut self.inner).poll_read(cx, &mut limited);
        if let Poll::Ready(Ok(())) = res {
            let n = limited.filled().len();
            buf.put_slice(&bounce[..n]);
            self.remaining -= n as u64;
            self.seen.fetch_add(n as u64, Ordering::Relaxed);
        }
        res
    }
}

/// Accepts at most `budget` bytes, then fails every write with a broken pipe.
pub struct FaultyWriter<W> {
    inner: W,
    remaining: u64,
}

impl<W> FaultyWriter<W> {
    pub fn new(inner: W, budget: u64) -> Self {
        FaultyWriter { inner, remaining: budget }
    }
}

impl<W: AsyncWrite + Unpin> AsyncWrite for FaultyWriter<W> {
    fn poll_write(mut self: Pin<&mut Self>, cx: &mut Context<'_>, data: &[u8]) -> Poll<io::Result<usize>> {
        if self.remaining == 0 {
            return Poll::Ready(Err(io::Error::new(io::ErrorKind::BrokenPipe, "injected broken pipe")));
        }
        let cap = data.len().min(self.remaining as usize);
        let res = Pin::new(&mut self.inner).poll_write(cx, &data[..cap]);
        if let Poll::Ready(Ok(n)) = res {
            self.remaining -= n as u64;
        }
        res
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}
