//! Incremental object-level novelty detection.
//!
//! A small MLP head is trained on frozen detector proposal features to
//! separate in-distribution (id) objects from out-of-distribution (ood)
//! ones. The head is refined session by session from accept/reject feedback,
//! replaying every stored feature, and is compared against logit-based
//! scoring baselines.
//!
//! Module map:
//! - [`featurestore`]: proposal feature records, the ONDF/JSONL formats and a
//!   seeded synthetic generator.
//! - [`benchkit`]: test-domain incremental benchmark construction.
//! - [`ndnet`]: the novelty head (4 hidden layers + bias-free projection).
//! - [`losses`]: supervised contrastive, detached BCE and the joint objective.
//! - [`optim`]: SGD/Adam, learning-rate schedules and early stopping.
//! - [`evalkit`]: baseline scores, FPR@95 and AUROC.
//! - [`looprunner`]: sessions, experience replay and the feedback ledger.

pub mod benchkit;
pub mod error;
pub mod evalkit;
pub mod featurestore;
pub mod looprunner;
pub mod losses;
pub mod ndnet;
pub mod optim;
pub(crate) mod rng;

pub use error::{Error, Result};
