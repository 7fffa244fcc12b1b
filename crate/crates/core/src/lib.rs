//! Deterministic simulator for Byzantine-robust federated learning.
//!
//! Clients `0..M` are Byzantine. Every random draw comes from a stream
//! keyed on the run seed (see [`rng`]), so runs repeat bit-for-bit.

pub mod aggregators;
pub mod attacks;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod vector;

pub use aggregators::{Aggregator, AggregatorSpec, Linkage, NormHistory};
pub use attacks::AttackSpec;
pub use data::{Dataset, Partition, PartitionScheme};
pub use error::{Error, Result};
pub use federation::{Algorithm, FederationConfig, RoundLog, RoundRecord, Schedule, Simulation};
pub use metrics::{SimilarityMatrix, Summary};
pub use models::{Architecture, Evaluation, ModelParams};
pub use vector::{ClientId, UpdateVector};
