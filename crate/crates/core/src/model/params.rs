use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{purpose, RngStream};
use crate::tensor::DenseMatrix;

/// Trainable weights of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    /// `w_a` is `J × F`, `w_b` is `F × M`, `r` is `1 × F`.
    Factorized {
        w_a: DenseMatrix,
        w_b: DenseMatrix,
        r: DenseMatrix,
    },
    /// A plain `J × M` weight.
    Dense { w: DenseMatrix },
}

impl LayerParams {
    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        match self {
            LayerParams::Factorized { w_a, w_b, r } => vec![w_a, w_b, r],
            LayerParams::Dense { w } => vec![w],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        match self {
            LayerParams::Factorized { w_a, w_b, r } => vec![w_a, w_b, r],
            LayerParams::Dense { w } => vec![w],
        }
    }

    /// Wire names of the tensors, in the order of [`LayerParams::tensors`].
    pub fn tensor_names(&self) -> &'static [&'static str] {
        match self {
            LayerParams::Factorized { .. } => &["w_a", "w_b", "r"],
            LayerParams::Dense { .. } => &["w"],
        }
    }
}

/// Globally shared parameters: factor dictionaries for factorized layers and
/// plain weights for the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorDictionary {
    pub layers: Vec<LayerParams>,
}

impl FactorDictionary {
    /// Zero-mean Gaussian init scaled by fan-in; `r` starts at one.
    pub fn init(model: &ModelConfig, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, 0, 0, purpose::INIT);
        let last = model.layers.len() - 1;
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (j, m) = (spec.out_dim, spec.in_dim);
                let gain = if i == last { 1.0 } else { 2.0 };
                match spec.factors {
                    Some(f) => {
                        let sb = (1.0 / m as f64).sqrt();
                        // A relaxed draw keeps roughly half of the factors active.
                        let sa = (2.0 * gain / f as f64).sqrt();
                        LayerParams::Factorized {
                            w_a: DenseMatrix::from_fn(j, f, |_, _| sa * rng.normal()),
                            w_b: DenseMatrix::from_fn(f, m, |_, _| sb * rng.normal()),
                            r: DenseMatrix::filled(1, f, 1.0),
                        }
                    }
                    None => {
                        let s = (gain / m as f64).sqrt();
                        LayerParams::Dense {
                            w: DenseMatrix::from_fn(j, m, |_, _| s * rng.normal()),
                        }
                    }
                }
            })
            .collect();
        Self { layers }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        self.layers.iter().flat_map(LayerParams::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers.iter_mut().flat_map(LayerParams::tensors_mut).collect()
    }

    /// `(name, tensor)` pairs with names of the form `layer{i}.{w_a|w_b|r|w}`.
    pub fn named_tensors(&self) -> Vec<(String, &DenseMatrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                layer
                    .tensor_names()
                    .iter()
                    .zip(layer.tensors())
                    .map(move |(n, t)| (format!("layer{i}.{n}"), t))
            })
            .collect()
    }

    /// Checks that every tensor has the shape `model` requires.
    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        if self.layers.len() != model.layers.len() {
            return Err(Error::Consistency(format!(
                "{} parameter layers for a {}-layer model",
                self.layers.len(),
                model.layers.len()
            )));
        }
        for (i, (params, spec)) in self.layers.iter().zip(&model.layers).enumerate() {
            let (j, m) = (spec.out_dim, spec.in_dim);
            let ok = match (params, spec.factors) {
                (LayerParams::Factorized { w_a, w_b, r }, Some(f)) => {
                    w_a.shape() == (j, f) && w_b.shape() == (f, m) && r.shape() == (1, f)
                }
                (LayerParams::Dense { w }, None) => w.shape() == (j, m),
                _ => false,
            };
            if !ok {
                return Err(Error::Consistency(format!(
                    "layer {i} parameters do not match the model"
                )));
            }
        }
        Ok(())
    }

    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.as_mut_slice().fill(0.0));
        out
    }
}

/// Per-client factor selections `b`, one vector per factorized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorScores {
    pub layers: Vec<Vec<f64>>,
}

impl FactorScores {
    /// Every factor active.
    pub fn ones(model: &ModelConfig) -> Self {
        Self {
            layers: model.factor_counts().into_iter().map(|f| vec![1.0; f]).collect(),
        }
    }

    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        let expected = model.factor_counts();
        let got: Vec<usize> = self.layers.iter().map(Vec::len).collect();
        if expected != got {
            return Err(Error::contract(format!(
                "factor scores sized {got:?}, model needs {expected:?}"
            )));
        }
        Ok(())
    }
}
