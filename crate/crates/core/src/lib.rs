//! Exact desk-scale simulator of a two-stage quantum money blockchain.
//!
//! Hidden-subspace money states are simulated as dense state vectors over
//! at most 20 qubits. Shards are minted into a proof-of-work ledger, then
//! combined into coins whose descriptor goes into a second logical ledger
//! on the same chain. The [`simnet`] and [`analytics`] modules measure the
//! reuse-attack probability and coin longevity against their closed forms.

pub mod analytics;
pub mod gf2;
pub mod lab;
pub mod ledger;
pub mod minischeme;
pub mod protocol;
pub mod qsim;
pub mod sigs;
pub mod simnet;

pub use gf2::{BitVec, Subspace};
pub use ledger::{Block, Chain, ChainParams, EntryTag, LedgerEntry};
pub use minischeme::{OracleRegistry, Serial};
pub use protocol::{ProtocolConfig, QuantumBitcoin, QuantumShard};
pub use qsim::{MeasurementOutcome, QuantumState};
