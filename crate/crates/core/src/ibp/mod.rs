//! Stick-breaking IBP prior over factor selections and its mean-field
//! Kumaraswamy / relaxed-Bernoulli posterior.

use crate::error::{Error, Result};
use crate::model::{forward_on_tape, FactorDictionary, FactorScores, LayerVars, ModelConfig};
use crate::rng::RngStream;
use crate::tape::{self, Tape, Var};
use crate::tensor::DenseMatrix;

/// IBP concentration, either absolute or as a ratio `α / F` applied per layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alpha {
    Fixed(f64),
    PerFactor(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorConfig {
    pub alpha: Alpha,
}

impl PriorConfig {
    pub fn fixed(alpha: f64) -> Self {
        Self {
            alpha: Alpha::Fixed(alpha),
        }
    }

    pub fn per_factor(ratio: f64) -> Self {
        Self {
            alpha: Alpha::PerFactor(ratio),
        }
    }

    /// Concentration for a layer truncated at `factors`.
    pub fn alpha_for(&self, factors: usize) -> f64 {
        match self.alpha {
            Alpha::Fixed(a) => a,
            Alpha::PerFactor(ratio) => ratio * factors as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match self.alpha {
            Alpha::Fixed(a) | Alpha::PerFactor(a) => a,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config("ibp alpha must be positive"));
        }
        Ok(())
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::per_factor(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelaxationConfig {
    pub temperature: f64,
    pub hard_threshold: f64,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            hard_threshold: 0.5,
        }
    }
}

impl RelaxationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("ibp temperature must be positive"));
        }
        if !(self.hard_threshold > 0.0 && self.hard_threshold < 1.0) {
            return Err(Error::config("ibp hard threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Unconstrained variational parameters of one factorized layer, each `1 × F`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalLayer {
    pub logit_pi: DenseMatrix,
    pub raw_c: DenseMatrix,
    pub raw_d: DenseMatrix,
}

/// A client's private posterior over factor selections.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientVariationalState {
    pub layers: Vec<VariationalLayer>,
}

impl ClientVariationalState {
    /// Names of the per-layer tensors; none of them may ever leave the client.
    pub const FIELD_NAMES: [&'static str; 3] = ["logit_pi", "raw_c", "raw_d"];

    /// Posterior at the prior: `π = 0.5`, `c = α`, `d = 1`.
    pub fn init(model: &ModelConfig, prior: &PriorConfig) -> Self {
        let layers = model
            .factor_counts()
            .into_iter()
            .map(|f| VariationalLayer {
                logit_pi: DenseMatrix::zeros(1, f),
                raw_c: DenseMatrix::filled(1, f, tape::softplus_inverse(prior.alpha_for(f))),
                raw_d: DenseMatrix::filled(1, f, tape::softplus_inverse(1.0)),
            })
            .collect();
        Self { layers }
    }

    pub fn pi(&self, layer: usize) -> Vec<f64> {
        self.layers[layer]
            .logit_pi
            .as_slice()
            .iter()
            .map(|&x| tape::sigmoid(x))
            .collect()
    }

    pub fn c(&self, layer: usize) -> Vec<f64> {
        self.layers[layer]
            .raw_c
            .as_slice()
            .iter()
            .map(|&x| tape::softplus(x))
            .collect()
    }

    pub fn d(&self, layer: usize) -> Vec<f64> {
        self.layers[layer]
            .raw_d
            .as_slice()
            .iter()
            .map(|&x| tape::softplus(x))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.logit_pi, &mut l.raw_c, &mut l.raw_d])
            .collect()
    }

    /// Deterministic selections `b_k = 1[π_k > threshold]`.
    pub fn hardened_scores(&self, threshold: f64) -> FactorScores {
        FactorScores {
            layers: (0..self.layers.len()).map(|l| harden(&self.pi(l), threshold)).collect(),
        }
    }

    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        let expected = model.factor_counts();
        let ok =
            self.layers.len() == expected.len()
                && self.layers.iter().zip(&expected).all(|(l, &f)| {
                    l.logit_pi.shape() == (1, f) && l.raw_c.shape() == (1, f) && l.raw_d.shape() == (1, f)
                });
        if !ok {
            return Err(Error::Consistency("variational state does not match the model".into()));
        }
        Ok(())
    }
}

/// Stick-breaking probabilities `π_k = Π_{κ≤k} v_κ`.
pub fn prior_pi(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(x) = v.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::contract(format!("stick variable {x} outside (0, 1]")));
    }
    let mut acc = 1.0;
    Ok(v.iter()
        .map(|&x| {
            acc *= x;
            acc
        })
        .collect())
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::shape(format!("vector lengths {a}, {b}, {c} differ")));
    }
    Ok(())
}

/// Reparameterized Kumaraswamy draws `(1 − (1−u)^{1/d})^{1/c}`.
pub fn sample_kumaraswamy(c: &[f64], d: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_lengths(c.len(), d.len(), u.len())?;
    if c.iter().chain(d).any(|&x| !(x > 0.0)) {
        return Err(Error::contract("Kumaraswamy parameters must be positive"));
    }
    Ok(c.iter()
        .zip(d)
        .zip(u)
        .map(|((&c, &d), &u)| tape::kumaraswamy_sample(c, d, u))
        .collect())
}

/// Relaxed Bernoulli draws `sigmoid((logit π + logit u) / τ)`.
pub fn sample_relaxed_bernoulli(pi: &[f64], tau: f64, u: &[f64]) -> Result<Vec<f64>> {
    check_lengths(pi.len(), u.len(), u.len())?;
    if !(tau > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    Ok(pi
        .iter()
        .zip(u)
        .map(|(&p, &u)| tape::relaxed_bernoulli_sample(p, u, tau))
        .collect())
}

/// `b_k = 1` iff `π_k > threshold`.
pub fn harden(pi: &[f64], threshold: f64) -> Vec<f64> {
    pi.iter().map(|&p| if p > threshold { 1.0 } else { 0.0 }).collect()
}

/// Closed-form `Σ_k KL(Kumaraswamy(c_k, d_k) ‖ Beta(α, 1))`.
pub fn kl_kumaraswamy_beta(c: &[f64], d: &[f64], alpha: f64) -> Result<f64> {
    check_lengths(c.len(), d.len(), d.len())?;
    if !(alpha > 0.0) || c.iter().chain(d).any(|&x| !(x > 0.0)) {
        return Err(Error::contract("Kumaraswamy/Beta parameters must be positive"));
    }
    Ok(c.iter()
        .zip(d)
        .map(|(&c, &d)| tape::kl_kumaraswamy_beta_term(c, d, alpha))
        .sum())
}

/// `Σ_k KL(Bernoulli(q_k) ‖ Bernoulli(p_k))` with probabilities clamped away from 0 and 1.
pub fn kl_bernoulli(q: &[f64], p: &[f64]) -> Result<f64> {
    check_lengths(q.len(), p.len(), p.len())?;
    Ok(q.iter().zip(p).map(|(&q, &p)| tape::kl_bernoulli_term(q, p)).sum())
}

/// Uniform noise for one minibatch: Kumaraswamy and relaxed-Bernoulli draws per factorized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise {
    pub sticks: Vec<f64>,
    pub selections: Vec<f64>,
}

impl LayerNoise {
    pub fn draw(model: &ModelConfig, rng: &mut RngStream) -> Vec<LayerNoise> {
        model
            .factor_counts()
            .into_iter()
            .map(|f| LayerNoise {
                sticks: rng.uniform_vec(f),
                selections: rng.uniform_vec(f),
            })
            .collect()
    }
}

/// Handles into a recorded negative-ELBO graph.
pub struct ElboGraph {
    pub loss: Var,
    pub nll: Var,
    pub kl: Option<Var>,
    /// Global parameters, in [`FactorDictionary::tensors`] order.
    pub global_params: Vec<Var>,
    /// Variational parameters, in [`ClientVariationalState::tensors_mut`] order.
    pub local_params: Vec<Var>,
}

/// Records the per-example negative ELBO for one minibatch:
/// `mean CE + (kl_scale / B) · R`, with
/// `R = Σ_ℓ KL(q(b) ‖ p(b | v̂)) + KL(q(v) ‖ p(v))` and a single sample `v̂` per layer.
///
/// With `kl_scale = B / |D_i|`, the per-batch losses times `B` summed over an
/// epoch add up to the full-data negative ELBO.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss<'a>(
    tape: &mut Tape<'a>,
    model: &ModelConfig,
    dict: &'a FactorDictionary,
    varstate: &'a ClientVariationalState,
    x: DenseMatrix,
    labels: &[usize],
    prior: &PriorConfig,
    relax: &RelaxationConfig,
    kl_scale: f64,
    noise: &[LayerNoise],
) -> Result<ElboGraph> {
    dict.check_compatible(model)?;
    varstate.check_compatible(model)?;
    if noise.len() != varstate.layers.len() {
        return Err(Error::contract("noise must cover every factorized layer"));
    }
    if x.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!("{} inputs for {} labels", x.rows(), labels.len())));
    }
    let batch = labels.len() as f64;
    let vars = LayerVars::bind(tape, dict, true);
    let global_params = LayerVars::flatten(&vars);

    let mut local_params = Vec::with_capacity(3 * varstate.layers.len());
    let mut scores = Vec::with_capacity(varstate.layers.len());
    let mut kl_terms = Vec::new();
    for ((layer, noise), f) in varstate.layers.iter().zip(noise).zip(model.factor_counts()) {
        let logit_pi = tape.param(&layer.logit_pi);
        let raw_c = tape.param(&layer.raw_c);
        let raw_d = tape.param(&layer.raw_d);
        local_params.extend([logit_pi, raw_c, raw_d]);
        let pi = tape.sigmoid(logit_pi);
        scores.push(tape.relaxed_bernoulli(pi, &noise.selections, relax.temperature)?);
        if kl_scale != 0.0 {
            let c = tape.softplus(raw_c);
            let d = tape.softplus(raw_d);
            let v = tape.kumaraswamy(c, d, &noise.sticks)?;
            let prior_pi = tape.cumprod(v);
            kl_terms.push(tape.kl_bernoulli(pi, prior_pi)?);
            kl_terms.push(tape.kl_kumaraswamy_beta(c, d, prior.alpha_for(f))?);
        }
    }

    let input = tape.constant_owned(x);
    let logits = forward_on_tape(tape, model, &vars, &scores, input)?;
    let nll = tape.softmax_cross_entropy(logits, labels)?;
    let mut loss = nll;
    let mut kl = None;
    if let Some((&first, rest)) = kl_terms.split_first() {
        let mut total = first;
        for &t in rest {
            total = tape.add(total, t)?;
        }
        let scaled = tape.scale(total, kl_scale / batch);
        loss = tape.add(nll, scaled)?;
        kl = Some(total);
    }
    Ok(ElboGraph {
        loss,
        nll,
        kl,
        global_params,
        local_params,
    })
}
