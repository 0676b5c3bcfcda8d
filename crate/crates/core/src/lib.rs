//! Deterministic simulator for client-level differentially private federated
//! learning with SGD or sharpness-aware local optimizers.
//!
//! Modules, bottom-up:
//! - [`nn`]: MLP with softmax cross-entropy over a flat parameter vector.
//! - [`optim`]: heavy-ball SGD and SAM local steps.
//! - [`privacy`]: clipping, Gaussian noise and the Rényi-DP accountant.
//! - [`data`]: synthetic data, the binary dataset format, client partitions.
//! - [`federation`]: the round loop, sparsification and aggregation.
//! - [`metrics`]: norm histograms, sensitivity and sharpness probes.

pub mod data;
pub mod error;
pub mod federation;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod privacy;
pub mod rng;

pub use data::{Dataset, Partition};
pub use error::{Error, Result};
pub use federation::{
    Federation, FederationConfig, LocalUpdateReport, Method, RoundRecord, RunOutput, SparsifyMode,
};
pub use nn::{Batch, MlpArchitecture, Objective, ParameterVector};
pub use optim::{OptimizerConfig, OptimizerState};
pub use privacy::{ClipResult, PrivacyLedger, PrivacySpec};
