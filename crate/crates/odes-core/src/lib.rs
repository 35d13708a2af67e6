//! Order-preserving storage of numeric values across a cluster of
//! non-colluding share servers.
//!
//! A plaintext column value is split into `m` additive shares, one per
//! server; the servers can order records by exchanging per-record share
//! differences (deltas) whose sum carries the sign of the plaintext
//! comparison, while no single server ever learns a value. The crate
//! bundles:
//!
//! - [`sharing`]: share generation, reconstruction and sign-aggregation
//!   comparison over bounded signed 128-bit arithmetic;
//! - [`index`]: the rank index replicated on every server;
//! - [`server`]: one share server's state machine (store, lockstep
//!   binary-search insert, rank queries, delete, persistence);
//! - [`client`]: the stateless client driving the protocols;
//! - [`transport`]: a deterministic in-process simulator and a TCP
//!   fabric with a fixed binary framing;
//! - [`baseline`]: a stateful order-preserving baseline used by the
//!   benchmark harness for structural comparison;
//! - [`harness`]: synthetic datasets, workload execution and metrics.

pub mod baseline;
pub mod client;
pub mod error;
pub mod harness;
pub mod index;
pub mod message;
pub mod rng;
pub mod server;
pub mod sharing;
pub mod transport;

pub use error::{OdesError, Result};
pub use index::{OrderIndex, RecordId};
pub use sharing::{
    aggregate_sign, local_delta, reconstruct, share, Delta, MaskParams, ShareVector,
};
