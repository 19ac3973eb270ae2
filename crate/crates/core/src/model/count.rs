use crate::federation::Algorithm;
use crate::model::ModelConfig;

/// Trainable parameter count under `algorithm`.
///
/// WAFFLe trains `J·F + F·M + F` per factorized layer; the baselines train the
/// full `J·M` weight of every layer.
pub fn count_parameters(model: &ModelConfig, algorithm: Algorithm) -> usize {
    model
        .layers
        .iter()
        .map(|l| match (algorithm, l.factors) {
            (Algorithm::Waffle, Some(f)) => l.out_dim * f + f * l.in_dim + f,
            _ => l.out_dim * l.in_dim,
        })
        .sum()
}
