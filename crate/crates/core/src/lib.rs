//! Federated learning with per-client networks assembled from a shared
//! dictionary of rank-1 weight factors, plus FedAvg/FedProx baselines,
//! non-i.i.d. partitioners, fairness metrics and a membership-inference harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conv;
pub mod data;
pub mod error;
pub mod federation;
pub mod ibp;
pub mod metrics;
pub mod mia;
pub mod model;
pub mod optim;
pub mod rng;
pub mod special;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use federation::Algorithm;
pub use ibp::{ClientVariationalState, PriorConfig, RelaxationConfig};
pub use model::{count_parameters, FactorDictionary, FactorScores, ModelConfig};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::DenseMatrix;
