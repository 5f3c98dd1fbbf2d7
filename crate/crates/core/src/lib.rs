//! A miniature transactional component runtime.
//!
//! Logical components are described by a [`component::ComponentModel`] and
//! validated offline against a layered call matrix. Transactions span
//! resource managers ([`rm::ManagedStore`], [`rm::TxnQueue`]) under a
//! two-phase-commit [`txn::Coordinator`] with a durable write-ahead log.
//! Legacy applications are reached through the table-driven
//! [`broker::Broker`], and [`harness`] drives deterministic scenarios with
//! injected crashes.

pub mod broker;
pub mod component;
pub mod harness;
pub mod log;
pub mod process;
pub mod rm;
pub mod sim;
pub mod txn;
pub mod value;

pub use component::{load_manifest, validate_layering, ComponentModel, LayerKind, ServiceRuntime};
pub use log::DurableLog;
pub use rm::{ManagedStore, ResourceManager, TxnQueue, UnmanagedResource, Vote};
pub use sim::{Event, EventKind, Trace};
pub use txn::{Coordinator, CrashPoint, FaultSpec, TransactionContext, TxnId, TxnStatus};
pub use value::{Fields, Value};
