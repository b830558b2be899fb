//! Framed wire protocol spoken between the sync client and the agent.
//!
//! Each side opens with the magic `RBS1`. After that everything is a frame:
//! a big-endian `u32` payload length (tag excluded), a `u8` tag and the
//! payload. All integers are big-endian.
//!
//! | tag  | frame       | payload                                        |
//! |------|-------------|------------------------------------------------|
//! | 0x01 | FileRequest | u16 path_len, path (utf8), u32 block_size      |
//! | 0x02 | SigHeader   | u64 basis_len, u64 sig_count                   |
//! | 0x03 | Sig         | u32 weak, 32-byte strong digest                |
//! | 0x10 | Copy        | u64 block index                                |
//! | 0x11 | Literal     | raw bytes                                      |
//! | 0x12 | FileEnd     | u64 source_len, u64 mtime_seconds, 32-byte digest |
//! | 0x7E | Error       | utf8 reason                                    |
//! | 0x7F | Quit        | empty                                          |

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufReader, BufWriter};

use super::checksum::StrongDigest;

pub const MAGIC: [u8; 4] = *b"RBS1";

pub const TAG_FILE_REQUEST: u8 = 0x01;
pub const TAG_SIG_HEADER: u8 = 0x02;
pub const TAG_SIG: u8 = 0x03;
pub const TAG_COPY: u8 = 0x10;
pub const TAG_LITERAL: u8 = 0x11;
pub const TAG_FILE_END: u8 = 0x12;
pub const TAG_ERROR: u8 = 0x7E;
pub const TAG_QUIT: u8 = 0x7F;

/// Frames larger than this are rejected before allocating.
pub const MAX_PAYLOAD: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    FileRequest { path: String, block_size: u32 },
    SigHeader { basis_len: u64, sig_count: u64 },
    Sig { weak: u32, strong: StrongDigest },
    Copy { index: u64 },
    Literal(Vec<u8>),
    FileEnd { source_len: u64, mtime: u64, digest: StrongDigest },
    Error(String),
    Quit,
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("peer closed the stream before the protocol greeting")]
    NoGreeting,
    #[error("bad protocol greeting {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("unknown frame tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("malformed frame 0x{tag:02x}: {reason}")]
    Malformed { tag: u8, reason: &'static str },
    #[error("frame payload of {0} bytes exceeds the limit")]
    TooLarge(u32),
}

impl Frame {
    pub fn tag(&self) -> u8 {
        match self {
            Frame::FileRequest { .. } => TAG_FILE_REQUEST,
            Frame::SigHeader { .. } => TAG_SIG_HEADER,
            Frame::Sig { .. } => TAG_SIG,
            Frame::Copy { .. } => TAG_COPY,
            Frame::Literal(_) => TAG_LITERAL,
            Frame::FileEnd { .. } => TAG_FILE_END,
            Frame::Error(_) => TAG_ERROR,
            Frame::Quit => TAG_QUIT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Frame::FileRequest { .. } => "FileRequest",
            Frame::SigHeader { .. } => "SigHeader",
            Frame::Sig { .. } => "Sig",
            Frame::Copy { .. } => "Copy",
            Frame::Literal(_) => "Literal",
            Frame::FileEnd { .. } => "FileEnd",
            Frame::Error(_) => "Error",
            Frame::Quit => "Quit",
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            Frame::FileRequest { path, block_size } => {
                p.extend_from_slice(&(path.len() as u16).to_be_bytes());
                p.extend_from_slice(path.as_bytes());
                p.extend_from_slice(&block_size.to_be_bytes());
            }
            Frame::SigHeader { basis_len, sig_count } => {
                p.extend_from_slice(&basis_len.to_be_bytes());
                p.extend_from_slice(&sig_count.to_be_bytes());
            }
            Frame::Sig { weak, strong } => {
                p.extend_from_slice(&weak.to_be_bytes());
                p.extend_from_slice(strong);
            }
            Frame::Copy { index } => p.extend_from_slice(&index.to_be_bytes()),
            Frame::Literal(bytes) => p.extend_from_slice(bytes),
            Frame::FileEnd { source_len, mtime, digest } => {
                p.extend_from_slice(&source_len.to_be_bytes());
                p.extend_from_slice(&mtime.to_be_bytes());
                p.extend_from_slice(digest);
            }
            Frame::Error(reason) => p.extend_from_slice(reason.as_bytes()),
            Frame::Quit => {}
        }
        p
    }

    /// Full encoding: length, tag, payload.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(5 + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.push(self.tag());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(tag: u8, payload: &[u8]) -> Result<Frame, WireError> {
        let bad = |reason| WireError::Malformed { tag, reason };
        let mut cur = Cursor { buf: payload, tag };
        let frame = match tag {
            TAG_FILE_REQUEST => {
                let len = cur.u16()? as usize;
                let path = cur.take(len)?;
                let path = std::str::from_utf8(path).map_err(|_| bad("path is not utf-8"))?.to_string();
                Frame::FileRequest {
                    path,
                    block_size: cur.u32()?,
                }
            }
            TAG_SIG_HEADER => Frame::SigHeader {
                basis_len: cur.u64()?,
                sig_count: cur.u64()?,
            },
            TAG_SIG => Frame::Sig {
                weak: cur.u32()?,
                strong: cur.digest()?,
            },
            TAG_COPY => Frame::Copy { index: cur.u64()? },
            TAG_LITERAL => {
                if payload.is_empty() {
                    return Err(bad("empty literal"));
                }
                cur.buf = &[];
                Frame::Literal(payload.to_vec())
            }
            TAG_FILE_END => Frame::FileEnd {
                source_len: cur.u64()?,
                mtime: cur.u64()?,
                digest: cur.digest()?,
            },
            TAG_ERROR => {
                cur.buf = &[];
                Frame::Error(String::from_utf8_lossy(payload).into_owned())
            }
            TAG_QUIT => Frame::Quit,
            other => return Err(WireError::UnknownTag(other)),
        };
        if !cur.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(frame)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    tag: u8,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Malformed {
                tag: self.tag,
                reason: "payload too short",
            });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<StrongDigest, WireError> {
        Ok(self.take(32)?.try_into().unwrap())
    }
}

/// Buffered framed stream over a reader/writer pair, counting wire bytes in
/// both directions.
pub struct FramedStream<R, W> {
    reader: BufReader<R>,
    writer: BufWriter<W>,
    sent: u64,
    received: u64,
}

impl<R: AsyncRead + Unpin, W: AsyncWrite + Unpin> FramedStream<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        FramedStream {
            reader: BufReader::with_capacity(128 * 1024, reader),
            writer: BufWriter::with_capacity(128 * 1024, writer),
            sent: 0,
            received: 0,
        }
    }

    /// Sends our greeting and waits for the peer's.
    pub async fn greet(&mut self) -> Result<(), WireError> {
        self.writer.write_all(&MAGIC).await?;
        self.writer.flush().await?;
        self.sent += MAGIC.len() as u64;
        let mut magic = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            let n = self.reader.read(&mut magic[got..]).await?;
            if n == 0 {
                return Err(if got == 0 { WireError::NoGreeting } else { WireError::Truncated });
            }
            got += n;
        }
        self.received += 4;
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        Ok(())
    }

    /// Queues a frame; call [`FramedStream::flush`] to push it out.
    pub async fn send(&mut self, frame: &Frame) -> Result<(), WireError> {
        let bytes = frame.encode();
        self.writer.write_all(&bytes).await?;
        self.sent += bytes.len() as u64;
        Ok(())
    }

    pub async fn flush(&mut self) -> Result<(), WireError> {
        self.writer.flush().await?;
        Ok(())
    }

    /// Next frame, or `None` if the peer closed the stream between frames.
    pub async fn recv(&mut self) -> Result<Option<Frame>, WireError> {
        let mut header = [0u8; 5];
        let mut got = 0;
        while got < header.len() {
            let n = self.reader.read(&mut header[got..]).await?;
            if n == 0 {
                return if got == 0 { Ok(None) } else { Err(WireError::Truncated) };
            }
            got += n;
        }
        let len = u32::from_be_bytes(header[..4].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(WireError::TooLarge(len));
        }
        let mut payload = vec![0u8; len as usize];
        self.reader.read_exact(&mut payload).await.map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                WireError::Truncated
            } else {
                WireError::Io(e)
            }
        })?;
        self.received += 5 + len as u64;
        Frame::decode(header[4], &payload).map(Some)
    }

    pub async fn shutdown(&mut self) -> Result<(), WireError> {
        self.writer.flush().await?;
        self.writer.shutdown().await?;
        Ok(())
    }

    pub fn bytes_sent(&self) -> u64 {
        self.sent
    }

    pub fn bytes_received(&self) -> u64 {
        self.received
    }

    pub fn wire_bytes(&self) -> u64 {
        self.sent + self.received
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_frame() -> impl Strategy<Value = Frame> {
        prop_oneof![
            ("[a-zA-Z0-9/._-]{0,40}", any::<u32>())
                .prop_map(|(path, block_size)| Frame::FileRequest { path, block_size }),
            (any::<u64>(), any::<u64>()).prop_map(|(basis_len, sig_count)| Frame::SigHeader { basis_len, sig_count }),
            (any::<u32>(), any::<[u8; 32]>()).prop_map(|(weak, strong)| Frame::Sig { weak, strong }),
            any::<u64>().prop_map(|index| Frame::Copy { index }),
            proptest::collection::vec(any::<u8>(), 1..300).prop_map(Frame::Literal),
            (any::<u64>(), any::<u64>(), any::<[u8; 32]>())
                .prop_map(|(source_len, mtime, digest)| Frame::FileEnd { source_len, mtime, digest }),
            ".{0,30}".prop_map(Frame::Error),
            Just(Frame::Quit),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(frame in arb_frame()) {
            let bytes = frame.encode();
            let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
            prop_assert_eq!(len, bytes.len() - 5);
            prop_assert_eq!(Frame::decode(bytes[4], &bytes[5..]).unwrap(), frame);
        }
    }

    #[test]
    fn fixed_layouts() {
        assert_eq!(Frame::Quit.encode(), [0, 0, 0, 0, 0x7f]);
        assert_eq!(
            Frame::Copy { index: 258 }.encode(),
            [0, 0, 0, 8, 0x10, 0, 0, 0, 0, 0, 0, 1, 2]
        );
        assert_eq!(
            Frame::FileRequest {
                path: "A".into(),
                block_size: 2048
            }
            .encode(),
            [0, 0, 0, 7, 0x01, 0, 1, b'A', 0, 0, 8, 0]
        );
        assert_eq!(Frame::Error("no".into()).encode(), [0, 0, 0, 2, 0x7e, b'n', b'o']);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(Frame::decode(0x55, &[]), Err(WireError::UnknownTag(0x55))));
        assert!(matches!(Frame::decode(TAG_COPY, &[1, 2]), Err(WireError::Malformed { .. })));
        assert!(matches!(Frame::decode(TAG_QUIT, &[0]), Err(WireError::Malformed { .. })));
        assert!(matches!(Frame::decode(TAG_LITERAL, &[]), Err(WireError::Malformed { .. })));
    }

    #[tokio::test]
    async fn stream_roundtrip_and_counts() {
        let (a, b) = tokio::io::duplex(64 * 1024);
        let (ar, aw) = tokio::io::split(a);
        let (br, bw) = tokio::io::split(b);
        let mut left = FramedStream::new(ar, aw);
        let mut right = FramedStream::new(br, bw);
        let (l, r) = tokio::join!(left.greet(), right.greet());
        l.unwrap();
        r.unwrap();
        left.send(&Frame::Copy { index: 7 }).await.unwrap();
        left.send(&Frame::Literal(vec![1; 3000])).await.unwrap();
        left.flush().await.unwrap();
        assert_eq!(right.recv().await.unwrap(), Some(Frame::Copy { index: 7 }));
        assert_eq!(right.recv().await.unwrap(), Some(Frame::Literal(vec![1; 3000])));
        assert_eq!(left.bytes_sent(), 4 + 13 + 3005);
        assert_eq!(right.bytes_received(), left.bytes_sent());
        left.shutdown().await.unwrap();
        assert_eq!(right.recv().await.unwrap(), None);
    }

    #[tokio::test]
    async fn greeting_failures() {
        let (a, b) = tokio::io::duplex(64);
        drop(b);
        let (ar, aw) = tokio::io::split(a);
        let mut s = FramedStream::new(ar, aw);
        assert!(s.greet().await.is_err());

        let (a, mut b) = tokio::io::duplex(64);
        b.write_all(b"SSH-").await.unwrap();
        let (ar, aw) = tokio::io::split(a);
        let mut s = FramedStream::new(ar, aw);
        assert!(matches!(s.greet().await, Err(WireError::BadMagic(_))));
    }
}
