//! Parallel runtime: role assignment, the phonebook directory with
//! dynamic load balancing, controller/worker/collector loops, and the
//! message transports they communicate over.

pub mod collector;
pub mod controller;
pub mod evaluator;
pub mod layout;
pub mod message;
pub mod phonebook;
pub mod root;
pub mod runtime;
pub mod socket;
pub mod transport;
pub mod wire;

pub use layout::{assign_roles, LayoutConfig};
pub use message::{CoarseMode, CollectionSample, Message, Role, Tag, TraceEvent};
pub use phonebook::{BalanceSettings, LoadLedger};
pub use runtime::{run_parallel, RunOutput, RuntimeConfig, RuntimeError, TransportKind};
