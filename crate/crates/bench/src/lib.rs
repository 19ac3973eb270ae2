//! Shared fixtures for the benchmarks.

use waffle_core::data::{partition_unimodal, ClientData, SynthSpec};
use waffle_core::federation::GlobalState;
use waffle_core::{FactorDictionary, ModelConfig};

/// Synthetic MNIST-shaped clients: 784 features, 10 classes, two classes each.
pub fn mnist_shaped_clients(clients: usize, per_class: usize) -> Vec<ClientData> {
    let pool = SynthSpec {
        classes: 10,
        per_class,
        dim: 784,
        separation: 6.0,
        seed: 1,
    }
    .generate()
    .expect("valid spec");
    partition_unimodal(&pool, clients, 2, 0.2, 1).expect("feasible partition")
}

pub fn initial_globals(model: &ModelConfig) -> GlobalState {
    GlobalState {
        dict: FactorDictionary::init(model, 0),
        round: 1,
    }
}
