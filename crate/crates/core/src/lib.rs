//! Remote session builds with incremental heap synchronization.
//!
//! The build runs on a remote machine reached over SSH (directly or through
//! a proxy jump). While it runs, finished heap images are pulled back with a
//! block-level delta transfer and installed locally with their remote
//! modification times.

pub mod cli;
pub mod delta_sync;
pub mod hostkeys;
pub mod orchestrator;
pub mod session_graph;
pub mod transport;
