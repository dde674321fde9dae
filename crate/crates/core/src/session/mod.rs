//! Two-party classical protocol: wire framing, transports, sifting, tallies
//! and key confirmation.

pub mod confirm;
pub mod roles;
pub mod sift;
pub mod tally;
pub mod transport;
pub mod wire;

pub use tally::{BasisCounts, RawTallies, TallySet};
pub use roles::{Alice, BlockKey, Bob, SessionConfig};
pub use transport::{MemoryTransport, RecordingTransport, TcpTransport, Transport};
pub use wire::WireMessage;
