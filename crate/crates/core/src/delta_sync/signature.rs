use std::io::{self, Read};

use super::checksum::{strong_digest, weak_checksum, StrongDigest};
use super::DeltaError;

pub const DEFAULT_BLOCK_SIZE: u32 = 2048;
pub const MIN_BLOCK_SIZE: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSignature {
    pub index: u64,
    pub weak: u32,
    pub strong: StrongDigest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureSet {
    pub block_size: u32,
    pub basis_len: u64,
    pub signatures: Vec<BlockSignature>,
}

impl SignatureSet {
    /// Signature set of an absent or empty basis.
    pub fn empty(block_size: u32) -> Self {
        SignatureSet {
            block_size,
            basis_len: 0,
            signatures: Vec::new(),
        }
    }

    pub fn block_count(&self) -> u64 {
        block_count(self.basis_len, self.block_size)
    }

    /// Length of the final block when it is shorter than `block_size`.
    pub fn short_tail_len(&self) -> Option<usize> {
        let rem = (self.basis_len % self.block_size as u64) as usize;
        (rem != 0).then_some(rem)
    }

    pub fn block_len(&self, index: u64) -> u64 {
        block_len(self.basis_len, self.block_size, index)
    }
}

pub fn block_count(basis_len: u64, block_size: u32) -> u64 {
    basis_len.div_ceil(block_size as u64)
}

pub(crate) fn block_len(basis_len: u64, block_size: u32, index: u64) -> u64 {
    let start = index * block_size as u64;
    basis_len.saturating_sub(start).min(block_size as u64)
}

pub fn check_block_size(block_size: u32) -> Result<(), DeltaError> {
    if block_size < MIN_BLOCK_SIZE {
        Err(DeltaError::BlockSizeTooSmall(block_size))
    } else {
        Ok(())
    }
}

/// Reads `basis` to the end and signs it block by block.
pub fn block_signatures<R: Read>(mut basis: R, block_size: u32) -> Result<SignatureSet, DeltaError> {
    check_block_size(block_size)?;
    let mut set = SignatureSet::empty(block_size);
    let mut block = vec![0u8; block_size as usize];
    loop {
        let n = read_full(&mut basis, &mut block)?;
        if n == 0 {
            break;
        }
        let data = &block[..n];
        set.signatures.push(BlockSignature {
            index: set.signatures.len() as u64,
            weak: weak_checksum(data),
            strong: strong_digest(data),
        });
        set.basis_len += n as u64;
        if n < block.len() {
            break;
        }
    }
    Ok(set)
}

/// Like `read_exact`, but a short read at end of stream is not an error.
pub(crate) fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}
