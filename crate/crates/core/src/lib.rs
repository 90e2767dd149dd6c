//! Runtime for executing generator-proposed actions under after-the-fact
//! human validation.
//!
//! Every action is staged inside a [`txn::Transaction`], checked against a
//! damage-confinement [`policy::BlastRadius`], executed by a kind-specific
//! handler inside a [`sandbox`], and then held until an operator commits
//! or undoes it. Secrets never reach the generator: the [`vault`] swaps
//! them for symbolic placeholders and rehydrates them only at dispatch.
//!
//! The [`runtime::Runtime`] type wires the pieces together; the modules
//! are usable on their own for embedding or testing.

pub mod action;
pub mod config;
pub mod generator;
pub mod handlers;
pub mod ids;
pub mod policy;
pub mod records;
pub mod registry;
pub mod revtest;
pub mod runtime;
pub mod sandbox;
pub mod stub;
pub mod tree;
pub mod txn;
pub mod vault;

mod serde_bytes;

pub use action::{ActionBody, ActionSpec, DbAction, FsAction, Kind, Mode, RestAction, UndoPolicy, UndoSpec};
pub use ids::TxnId;
pub use runtime::{Runtime, RuntimeError, Submission};
pub use txn::{ExecutionOutcome, StagedAction, Transaction, TxState, UndoSource};
