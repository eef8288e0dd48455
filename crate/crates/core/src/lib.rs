//! Structured pruning adapters: low-rank adapters that share channel-pruning
//! masks with a frozen base network, plus the pruning, accounting, and
//! persistence machinery around them.

pub mod accounting;
pub mod adapter;
pub mod compute;
pub mod data;
pub mod error;
pub mod mask;
pub mod network;
pub mod persistence;
pub mod pruning;
pub mod train;

pub use error::{Error, Result};
