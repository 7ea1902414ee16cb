//! Multi-behavior recommendation engine.
//!
//! Users interact with items through an ordered chain of behavior types
//! (for example view, cart, buy); the last behavior is the prediction
//! target and the earlier ones are auxiliary signal. The engine fuses the
//! behaviors with a constraint-staged graph convolution network (COGCN),
//! scores pairs with a distribution-fitting multi-expert head (DFME),
//! trains the joint pairwise-ranking + contrastive objective with Adam,
//! and evaluates leave-one-out HR@10 / NDCG@10 over the full catalog.
//!
//! Everything runs on a small `f64` reverse-mode differentiation core
//! ([`tensor`]) built for verifiability: a brute-force dense reference
//! ([`oracle`]) recomputes every quantity independently, and central
//! finite differences check every gradient, including the stop-gradient
//! semantics of the prediction head.
//!
//! See the crate examples for end-to-end usage; the `copf` binary wraps
//! the same entry points as subcommands (`prepare`, `train`, `eval`,
//! `ablate`, `gradcheck`).

pub mod cli;
pub mod cogcn;
pub mod config;
pub mod data;
pub mod dfme;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod oracle;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{CopfError, Result};
