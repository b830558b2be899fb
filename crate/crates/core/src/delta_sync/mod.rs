//! Block-signature delta transfer.
//!
//! The receiver signs its stale copy of a file block by block, the sender
//! answers with a stream of `Copy` and `Literal` ops computed against those
//! signatures, and the receiver rebuilds the file, checks the whole-file
//! digest and atomically installs it with the sender's mtime.

pub mod agent;
pub mod checksum;
pub mod client;
pub mod delta;
pub mod signature;
pub mod wire;

use std::io;

use thiserror::Error;

pub use agent::serve_agent;
pub use checksum::{roll, strong_digest, weak_checksum, weak_state, ChecksumState, RollingChecksum, StrongDigest};
pub use client::{cleanup_temp_files, fetch_full, sync_file, AgentClient, SyncStats};
pub use delta::{apply_delta, compute_delta, encode_delta, Delta, DeltaApplier, DeltaOp, MAX_LITERAL_CHUNK};
pub use signature::{block_signatures, BlockSignature, SignatureSet, DEFAULT_BLOCK_SIZE, MIN_BLOCK_SIZE};
pub use wire::{Frame, FramedStream, WireError};

use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum DeltaError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("block size {0} is below the minimum of {MIN_BLOCK_SIZE}")]
    BlockSizeTooSmall(u32),
    #[error("copy of block {index} but the basis has only {blocks} blocks")]
    CopyOutOfRange { index: u64, blocks: u64 },
    #[error("reconstructed file does not match the sender's digest")]
    DigestMismatch,
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("sync agent unavailable: {0}")]
    AgentUnavailable(String),
    #[error("protocol error: {0}")]
    Wire(#[from] WireError),
    #[error("agent reported: {0}")]
    Remote(String),
    #[error("unexpected {got} frame while waiting for {expected}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error(transparent)]
    Delta(#[from] DeltaError),
    #[error("local file error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid remote path `{0}`")]
    InvalidPath(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("transfer of {path} failed: {detail}")]
    Transfer { path: String, detail: String },
}

impl SyncError {
    pub fn is_digest_mismatch(&self) -> bool {
        matches!(self, SyncError::Delta(DeltaError::DigestMismatch))
    }
}

/// Relative, `/`-separated, without `.`/`..` components or empty segments.
pub fn is_safe_relative_path(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\0')
        && path.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..")
}
