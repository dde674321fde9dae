//! Error correction and privacy amplification.

pub mod cascade;
pub mod toeplitz;

pub use cascade::{initial_block_size, pass_count, reconcile, CascadeCorrector, CascadeOutcome, CascadeResponder, PASSES};
pub use toeplitz::toeplitz_hash;
