//! Hybrid social-media action prediction.
//!
//! The pipeline predicts which of 12 user actions a responder takes on a
//! conversation thread, in four stages:
//!
//! 1. a rule that maps threads of three or more messages to `reply`,
//! 2. a per-message vote table queried with cluster-specific, global-fallback,
//!    and no-match strategies,
//! 3. one gradient-boosted 3-class model (`follow` / `like` / `other`) per
//!    persona cluster, and
//! 4. a dual-branch (text + temporal) classifier that resolves `other` into
//!    one of the ten rare actions.
//!
//! Reply text for predicted `reply` actions is produced through a pluggable
//! text-generation provider, and [`eval`] scores runs with confusion-matrix
//! F1 reports and embedding cosine similarity.

pub mod binio;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod features;
pub mod gbdt;
pub mod lookup;
pub mod rare;
pub mod replygen;
pub mod router;
pub mod synthetic;
