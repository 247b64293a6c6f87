//! Federated-learning attack/defense arena.
//!
//! The crate simulates federated training with poisoning clients and compares
//! robust aggregation rules against an adaptive defense that reconstructs each
//! client's data distribution by gradient inversion, scores its stability with
//! MMD-based cues and lets a TD3 policy pick aggregation weights.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod adaagg;
pub mod attacks;
pub mod cues;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod inversion;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod params;
pub mod rl;
pub mod rng;
pub mod robust;

pub use data::{Batch, ImageDims, Shard};
pub use error::{Error, Result};
pub use fl::{Federation, RoundPlan, RoundRecord, ShardAssignment};
pub use model::{Model, ModelSpec};
pub use params::{cosine, ParamVector};
pub use rl::{Action, Td3Config};
