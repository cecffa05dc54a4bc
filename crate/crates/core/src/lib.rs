//! One-sided consensus and state machine replication over a deterministic
//! simulated remote-memory fabric.
//!
//! The building blocks, bottom up:
//!
//! - [`types`]: acceptor state triples, packed slot words, proposal
//!   arithmetic.
//! - [`fabric`]: the simulated memory-and-message fabric -- virtual-time
//!   scheduling, per-link FIFO, crash injection, counters, traces; plus a
//!   real-thread mode over hardware atomics.
//! - [`rpcpaxos`]: classic message-passing abortable consensus, kept as the
//!   correctness oracle and the proposal-overflow fallback engine.
//! - [`casrpc`]: the generic transformation of qualifying RPCs into
//!   fetch-plus-CAS invocations.
//! - [`onesided`]: abortable consensus built from those invocations, in the
//!   direct (fresh fetch) and streamlined (predicted state) forms.
//! - [`election`]: crash-notification driven leader election and the wrapper
//!   that turns abortable consensus into consensus.
//! - [`smr`]: the multi-slot replicated log -- slot pre-preparation, payload
//!   indirection, decision piggybacking, overflow fallback, deterministic
//!   service application.
//! - [`checker`]: bounded exhaustive interleaving exploration for small
//!   configurations, with counterexample replay.
//! - [`scenario`]: calibrated virtual-time experiment runners and their
//!   metrics/trace outputs.
//! - [`suites`]: the property suites the acceptance gate and the CLI share.

pub mod casrpc;
pub mod checker;
pub mod defect;
pub mod election;
pub mod fabric;
pub mod msg;
pub mod onesided;
pub mod rpcpaxos;
pub mod scenario;
pub mod smr;
pub mod suites;
pub mod types;
