//! Time-bin three-state BB84 with one decoy: optical link and detector
//! simulator, two-party post-processing stack and finite-key analysis.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod experiment;
pub mod linksim;
pub mod model;
pub mod photonic;
pub mod postprocessing;
pub mod scalar;
pub mod security;
pub mod session;

pub use error::{Error, Result};
pub use model::{Basis, Intensity, StateSymbol};
pub use scalar::Real;

pub type Params = model::ProtocolParams<f64>;
pub type Bounds = security::Bounds<f64>;
pub type Tallies = session::TallySet<f64>;
