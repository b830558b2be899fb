//! Delta computation (sender side) and reconstruction (receiver side).

use std::collections::HashMap;
use std::io::{self, Read, Seek, SeekFrom, Write};

use sha2::{Digest, Sha256};

use super::checksum::{strong_digest, weak_checksum, RollingChecksum, StrongDigest};
use super::signature::{block_len, read_full, SignatureSet};
use super::DeltaError;

/// Upper bound for the payload of a single literal op.
pub const MAX_LITERAL_CHUNK: usize = 64 * 1024;

const READ_CHUNK: usize = 256 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeltaOp {
    Copy(u64),
    Literal(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delta {
    /// Block size of the signature set the delta was computed against.
    pub block_size: u32,
    pub ops: Vec<DeltaOp>,
    pub source_len: u64,
    pub source_digest: StrongDigest,
}

impl Delta {
    pub fn literal_bytes(&self) -> u64 {
        self.ops
            .iter()
            .map(|op| match op {
                DeltaOp::Literal(b) => b.len() as u64,
                DeltaOp::Copy(_) => 0,
            })
            .sum()
    }

    pub fn copied_bytes(&self) -> u64 {
        self.source_len - self.literal_bytes()
    }

    pub fn copy_count(&self) -> usize {
        self.ops.iter().filter(|op| matches!(op, DeltaOp::Copy(_))).count()
    }
}

/// Summary returned by [`encode_delta`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeSummary {
    pub source_len: u64,
    pub source_digest: StrongDigest,
}

struct MatchTable<'a> {
    sigs: &'a SignatureSet,
    // 16-bit tag prefilter in front of the hash map, probed once per byte.
    tags: Vec<bool>,
    by_weak: HashMap<u32, Vec<u64>>,
}

fn tag(weak: u32) -> usize {
    ((weak ^ (weak >> 16)) & 0xffff) as usize
}

impl<'a> MatchTable<'a> {
    fn new(sigs: &'a SignatureSet) -> Self {
        let mut tags = vec![false; 1 << 16];
        let mut by_weak: HashMap<u32, Vec<u64>> = HashMap::new();
        let full = sigs.basis_len / sigs.block_size as u64;
        // Only full-size blocks can match mid-stream.
        for sig in sigs.signatures.iter().take(full as usize) {
            tags[tag(sig.weak)] = true;
            by_weak.entry(sig.weak).or_default().push(sig.index);
        }
        MatchTable { sigs, tags, by_weak }
    }

    fn is_empty(&self) -> bool {
        self.by_weak.is_empty()
    }

    fn find(&self, weak: u32, window: &[u8]) -> Option<u64> {
        if !self.tags[tag(weak)] {
            return None;
        }
        let candidates = self.by_weak.get(&weak)?;
        let strong = strong_digest(window);
        candidates
            .iter()
            .copied()
            .find(|&i| self.sigs.signatures[i as usize].strong == strong)
    }

    fn short_tail(&self) -> Option<(u64, usize)> {
        let len = self.sigs.short_tail_len()?;
        let last = self.sigs.signatures.last()?;
        Some((last.index, len))
    }
}

/// Streams the delta of `source` against `sigs` into `emit`.
///
/// A window of `block_size` bytes slides over the source. When its weak
/// checksum hits a basis block and the strong digests agree, pending literal
/// bytes are flushed and a `Copy` is emitted; the window then jumps a whole
/// block. The short final basis block can only match at the very end of the
/// source. Literals are emitted in chunks of at most [`MAX_LITERAL_CHUNK`].
pub fn encode_delta<R, F>(mut source: R, sigs: &SignatureSet, mut emit: F) -> Result<EncodeSummary, DeltaError>
where
    R: Read,
    F: FnMut(DeltaOp) -> io::Result<()>,
{
    let bs = sigs.block_size as usize;
    let table = MatchTable::new(sigs);
    let mut hasher = Sha256::new();
    let mut source_len = 0u64;

    let mut buf: Vec<u8> = Vec::with_capacity(READ_CHUNK + bs);
    let mut chunk = vec![0u8; READ_CHUNK];
    let mut eof = false;
    let mut pos = 0usize;
    let mut lit_start = 0usize;
    let mut rolling: Option<RollingChecksum> = None;

    let flush_literal = |buf: &[u8], from: usize, to: usize, emit: &mut F| -> io::Result<()> {
        for piece in buf[from..to].chunks(MAX_LITERAL_CHUNK) {
            emit(DeltaOp::Literal(piece.to_vec()))?;
        }
        Ok(())
    };

    loop {
        // Keep at least one window plus the next incoming byte buffered.
        while !eof && buf.len() < pos + bs + 1 {
            if lit_start > 4 * READ_CHUNK {
                buf.drain(..lit_start);
                pos -= lit_start;
                lit_start = 0;
            }
            let n = read_full(&mut source, &mut chunk)?;
            if n == 0 {
                eof = true;
            } else {
                hasher.update(&chunk[..n]);
                source_len += n as u64;
                buf.extend_from_slice(&chunk[..n]);
            }
        }

        if buf.len() - pos < bs || table.is_empty() {
            break;
        }

        let window = &buf[pos..pos + bs];
        let weak = match &rolling {
            Some(r) => r.value(),
            None => {
                let r = RollingChecksum::new(window);
                let v = r.value();
                rolling = Some(r);
                v
            }
        };

        if let Some(index) = table.find(weak, window) {
            flush_literal(&buf, lit_start, pos, &mut emit)?;
            emit(DeltaOp::Copy(index))?;
            pos += bs;
            lit_start = pos;
            rolling = None;
            continue;
        }

        if pos + bs < buf.len() {
            if let Some(r) = rolling.as_mut() {
                r.roll(buf[pos], buf[pos + bs]);
            }
            pos += 1;
            if pos - lit_start >= MAX_LITERAL_CHUNK {
                flush_literal(&buf, lit_start, pos, &mut emit)?;
                lit_start = pos;
            }
        } else {
            // The window touches the end of the source.
            break;
        }
    }

    // Drain the rest of the source when no mid-stream matching is possible.
    while !eof {
        let n = read_full(&mut source, &mut chunk)?;
        if n == 0 {
            eof = true;
        } else {
            hasher.update(&chunk[..n]);
            source_len += n as u64;
            buf.extend_from_slice(&chunk[..n]);
            if buf.len() - lit_start > 4 * READ_CHUNK {
                let upto = buf.len() - bs;
                flush_literal(&buf, lit_start, upto, &mut emit)?;
                buf.drain(..upto);
                lit_start = 0;
            }
        }
    }

    let end = buf.len();
    if let Some((index, len)) = table.short_tail() {
        if end >= lit_start + len {
            let tail = &buf[end - len..];
            let sig = &sigs.signatures[index as usize];
            if weak_checksum(tail) == sig.weak && strong_digest(tail) == sig.strong {
                flush_literal(&buf, lit_start, end - len, &mut emit)?;
                emit(DeltaOp::Copy(index))?;
                lit_start = end;
            }
        }
    }
    flush_literal(&buf, lit_start, end, &mut emit)?;

    Ok(EncodeSummary {
        source_len,
        source_digest: hasher.finalize().into(),
    })
}

/// In-memory convenience wrapper around [`encode_delta`].
pub fn compute_delta<R: Read>(source: R, sigs: &SignatureSet) -> Result<Delta, DeltaError> {
    let mut ops = Vec::new();
    let summary = encode_delta(source, sigs, |op| {
        ops.push(op);
        Ok(())
    })?;
    Ok(Delta {
        block_size: sigs.block_size,
        ops,
        source_len: summary.source_len,
        source_digest: summary.source_digest,
    })
}

/// Incremental delta reconstruction into `out`.
///
/// The caller feeds ops one at a time and must call [`DeltaApplier::finish`];
/// if that fails, whatever was written to `out` is garbage and must be
/// discarded.
pub struct DeltaApplier<B, W> {
    basis: Option<B>,
    basis_len: u64,
    block_size: u32,
    out: W,
    hasher: Sha256,
    written: u64,
    literal_bytes: u64,
    copied_bytes: u64,
    scratch: Vec<u8>,
}

impl<B: Read + Seek, W: Write> DeltaApplier<B, W> {
    pub fn new(basis: Option<B>, block_size: u32, out: W) -> Result<Self, DeltaError> {
        let mut basis = basis;
        let basis_len = match basis.as_mut() {
            Some(b) => b.seek(SeekFrom::End(0))?,
            None => 0,
        };
        Ok(DeltaApplier {
            basis,
            basis_len,
            block_size,
            out,
            hasher: Sha256::new(),
            written: 0,
            literal_bytes: 0,
            copied_bytes: 0,
            scratch: vec![0u8; block_size as usize],
        })
    }

    pub fn apply(&mut self, op: &DeltaOp) -> Result<(), DeltaError> {
        match op {
            DeltaOp::Literal(bytes) => {
                self.write(bytes)?;
                self.literal_bytes += bytes.len() as u64;
            }
            DeltaOp::Copy(index) => {
                let len = block_len(self.basis_len, self.block_size, *index) as usize;
                let basis = match self.basis.as_mut() {
                    Some(b) if len > 0 => b,
                    _ => {
                        return Err(DeltaError::CopyOutOfRange {
                            index: *index,
                            blocks: super::signature::block_count(self.basis_len, self.block_size),
                        })
                    }
                };
                basis.seek(SeekFrom::Start(index * self.block_size as u64))?;
                let mut scratch = std::mem::take(&mut self.scratch);
                let res = basis
                    .read_exact(&mut scratch[..len])
                    .map_err(DeltaError::from)
                    .and_then(|_| self.write(&scratch[..len]));
                self.scratch = scratch;
                res?;
                self.copied_bytes += len as u64;
            }
        }
        Ok(())
    }

    fn write(&mut self, bytes: &[u8]) -> Result<(), DeltaError> {
        self.out.write_all(bytes)?;
        self.hasher.update(bytes);
        self.written += bytes.len() as u64;
        Ok(())
    }

    pub fn literal_bytes(&self) -> u64 {
        self.literal_bytes
    }

    pub fn copied_bytes(&self) -> u64 {
        self.copied_bytes
    }

    /// Checks length and digest of everything written and hands back `out`.
    pub fn finish(mut self, source_len: u64, digest: &StrongDigest) -> Result<W, DeltaError> {
        self.out.flush()?;
        let actual: StrongDigest = self.hasher.finalize().into();
        if self.written != source_len || actual != *digest {
            return Err(DeltaError::DigestMismatch);
        }
        Ok(self.out)
    }
}

/// Rebuilds the source of `delta` from `basis` in memory.
pub fn apply_delta<B: Read + Seek>(basis: B, delta: &Delta) -> Result<Vec<u8>, DeltaError> {
    let mut applier = DeltaApplier::new(Some(basis), delta.block_size, Vec::with_capacity(delta.source_len as usize))?;
    for op in &delta.ops {
        applier.apply(op)?;
    }
    applier.finish(delta.source_len, &delta.source_digest)
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::super::signature::block_signatures;
    use super::*;

    fn pseudo_random(len: usize, seed: u32) -> Vec<u8> {
        let mut x = seed.wrapping_mul(2654435761).wrapping_add(1);
        (0..len)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 17;
                x ^= x << 5;
                (x >> 24) as u8
            })
            .collect()
    }

    fn roundtrip(basis: &[u8], source: &[u8], bs: u32) -> Delta {
        let sigs = block_signatures(basis, bs).unwrap();
        let delta = compute_delta(source, &sigs).unwrap();
        assert_eq!(delta.source_len, source.len() as u64);
        assert_eq!(apply_delta(Cursor::new(basis), &delta).unwrap(), source);
        for op in &delta.ops {
            if let DeltaOp::Literal(b) = op {
                assert!(!b.is_empty() && b.len() <= MAX_LITERAL_CHUNK);
            }
        }
        delta
    }

    #[test]
    fn self_sync_is_all_copies() {
        let data = pseudo_random(4 * 2048, 1);
        let d = roundtrip(&data, &data, 2048);
        assert_eq!(d.literal_bytes(), 0);
        assert_eq!(d.ops, (0..4).map(DeltaOp::Copy).collect::<Vec<_>>());
    }

    #[test]
    fn self_sync_with_short_tail() {
        let data = pseudo_random(5000, 2);
        let d = roundtrip(&data, &data, 2048);
        assert_eq!(d.literal_bytes(), 0);
        assert_eq!(d.copy_count(), 3);
    }

    #[test]
    fn empty_signatures_give_literals() {
        let data = pseudo_random(200_000, 3);
        let d = roundtrip(b"", &data, 2048);
        assert_eq!(d.copied_bytes(), 0);
        assert_eq!(d.copy_count(), 0);
        assert_eq!(d.ops.len(), 4);
    }

    #[test]
    fn empty_source() {
        let d = roundtrip(&pseudo_random(3000, 4), b"", 2048);
        assert!(d.ops.is_empty());
        let d = roundtrip(b"", b"", 64);
        assert!(d.ops.is_empty());
    }

    #[test]
    fn one_byte_change() {
        let basis = pseudo_random(4 * 2048, 5);
        let mut source = basis.clone();
        source[2 * 2048 + 100] ^= 0x5a;
        let d = roundtrip(&basis, &source, 2048);
        assert!(d.copy_count() >= 3);
        assert!(d.literal_bytes() <= 2 * 2048);
    }

    #[test]
    fn shifted_content_still_matches() {
        let basis = pseudo_random(64 * 1024, 6);
        let mut source = b"inserted prefix".to_vec();
        source.extend_from_slice(&basis);
        let d = roundtrip(&basis, &source, 1024);
        assert_eq!(d.literal_bytes(), 15);
    }

    #[test]
    fn short_tail_only_matches_at_end() {
        let basis = pseudo_random(2048 + 100, 7);
        let tail = basis[2048..].to_vec();
        // The tail block in the middle of the source must not be copied.
        let mut source = tail.clone();
        source.extend_from_slice(&pseudo_random(3000, 8));
        let d = roundtrip(&basis, &source, 2048);
        assert_eq!(d.copy_count(), 0);

        let mut source = pseudo_random(10, 9);
        source.extend_from_slice(&tail);
        let d = roundtrip(&basis, &source, 2048);
        assert_eq!(d.ops.last(), Some(&DeltaOp::Copy(1)));
        assert_eq!(d.literal_bytes(), 10);
    }

    #[test]
    fn tampered_literal_is_detected() {
        let basis = pseudo_random(8192, 10);
        let mut source = basis.clone();
        source[10] ^= 1;
        let sigs = block_signatures(&basis[..], 2048).unwrap();
        let mut d = compute_delta(&source[..], &sigs).unwrap();
        let lit = d
            .ops
            .iter_mut()
            .find_map(|op| match op {
                DeltaOp::Literal(b) => Some(b),
                _ => None,
            })
            .unwrap();
        lit[0] ^= 0x80;
        assert!(matches!(
            apply_delta(Cursor::new(&basis), &d),
            Err(DeltaError::DigestMismatch)
        ));
    }

    #[test]
    fn copy_out_of_range() {
        let d = Delta {
            block_size: 64,
            ops: vec![DeltaOp::Copy(5)],
            source_len: 64,
            source_digest: [0; 32],
        };
        assert!(matches!(
            apply_delta(Cursor::new(vec![0u8; 128]), &d),
            Err(DeltaError::CopyOutOfRange { index: 5, blocks: 2 })
        ));
    }

    #[test]
    fn literal_onto_empty_basis() {
        let d = Delta {
            block_size: 2048,
            ops: vec![DeltaOp::Literal(b"abc".to_vec())],
            source_len: 3,
            source_digest: strong_digest(b"abc"),
        };
        assert_eq!(apply_delta(Cursor::new(Vec::new()), &d).unwrap(), b"abc");
    }

    #[test]
    fn large_unmatched_source_streams() {
        let basis = pseudo_random(4096, 11);
        let source = pseudo_random(3 * 1024 * 1024 + 17, 12);
        let d = roundtrip(&basis, &source, 2048);
        assert_eq!(d.copied_bytes(), 0);
    }
}
