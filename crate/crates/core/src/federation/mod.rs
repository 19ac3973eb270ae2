use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Waffle,
    FedAvg,
    FedProx,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Waffle, Algorithm::FedAvg, Algorithm::FedProx];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Waffle => "waffle",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown algorithm `{s}` (expected waffle, fedavg or fedprox)")))
    }
}

mod client;
mod server;
pub mod wire;

pub use client::{fedavg_client_update, fedprox_client_update, waffle_client_update};
pub use server::{
    aggregate_mean, effective_model, evaluate_client, evaluation_scores, run_training, sample_clients, ExecutionOrder,
    MessageTap, RoundEvaluation, RoundRecord, RunOptions, TrainingHistory, TrainingRun,
};
pub use wire::{deserialize_update, serialize_update, UpdateMessage};

use crate::ibp::{PriorConfig, RelaxationConfig};
use crate::model::FactorDictionary;

/// Parameters held by the server: the factor dictionary and the round it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub dict: FactorDictionary,
    pub round: usize,
}

/// How a client that has never trained picks factors at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UnqueriedEval {
    #[default]
    AllOnes,
    /// One draw from the stick-breaking prior, fixed per client.
    PriorSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    pub rounds: usize,
    /// Fraction `C` of clients sampled per round.
    pub fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Proximal coefficient; only used by FedProx.
    pub mu: f64,
    pub algorithm: Algorithm,
    /// Per-client weights `p_i` indexed like the client list; `None` is uniform.
    pub client_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub prior: PriorConfig,
    pub relaxation: RelaxationConfig,
    pub unqueried: UnqueriedEval,
    /// Multiplier on the `B/|D_i|` KL scale.
    pub kl_weight: f64,
    /// Evaluate every client each `eval_every` rounds and after the last; 0 means last only.
    pub eval_every: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            fraction: 0.1,
            local_epochs: 5,
            batch_size: 10,
            lr: 0.04,
            mu: 1.0,
            algorithm: Algorithm::Waffle,
            client_weights: None,
            seed: 0,
            prior: PriorConfig::default(),
            relaxation: RelaxationConfig::default(),
            unqueried: UnqueriedEval::AllOnes,
            kl_weight: 1.0,
            eval_every: 5,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if clients == 0 {
            return Err(Error::config("no clients"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config(format!(
                "client fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config("learning rate and mu must be finite and non-negative"));
        }
        if let Some(w) = &self.client_weights {
            if w.len() != clients {
                return Err(Error::config(format!(
                    "{} client weights for {clients} clients",
                    w.len()
                )));
            }
            if w.iter().any(|&p| !(p >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config("client weights must be non-negative and sum to 1"));
            }
        }
        self.prior.validate()?;
        self.relaxation.validate()
    }
}
