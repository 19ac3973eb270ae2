//! Network layouts whose weight matrices may be drawn from a shared rank-1
//! factor dictionary, `W = W_a · diag(r ⊙ b) · W_b`.

mod count;
mod forward;
mod params;

pub use count::count_parameters;
pub use forward::{compose_weight, forward, forward_on_tape, predict, LayerVars};
pub use params::{FactorDictionary, FactorScores, LayerParams};

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    /// Convolution over patches, followed by non-overlapping max pooling when `pool > 1`.
    Conv {
        geom: ConvGeometry,
        pool: usize,
    },
}

/// One weight layer. For convolutions `in_dim` is `C·kh·kw` and `out_dim` the
/// number of output channels, i.e. the shape of the reshaped kernel matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub out_dim: usize,
    pub in_dim: usize,
    /// Truncation level `F`; `None` keeps the layer as a plain dense weight.
    pub factors: Option<usize>,
    pub relu: bool,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, factors: Option<usize>, relu: bool) -> Self {
        Self {
            kind: LayerKind::Dense,
            out_dim,
            in_dim,
            factors,
            relu,
        }
    }

    pub fn conv(geom: ConvGeometry, out_channels: usize, pool: usize, factors: Option<usize>) -> Self {
        Self {
            kind: LayerKind::Conv { geom, pool },
            out_dim: out_channels,
            in_dim: geom.patch_len(),
            factors,
            relu: true,
        }
    }

    /// Flattened features consumed per example.
    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim,
            LayerKind::Conv { geom, .. } => geom.input_len(),
        }
    }

    /// Flattened features produced per example (after pooling).
    pub fn output_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.out_dim,
            LayerKind::Conv { geom, pool } => {
                let p = pool.max(1);
                self.out_dim * (geom.out_h() / p) * (geom.out_w() / p)
            }
        }
    }

    pub fn is_factorized(&self) -> bool {
        self.factors.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub input_len: usize,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

pub const PRESETS: [&str; 3] = ["mnist-mlp", "fmnist-conv", "cifar-conv"];

impl ModelConfig {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::config("model has no layers"))?;
        let input_len = first.input_len();
        for spec in &layers {
            if spec.in_dim == 0 || spec.out_dim == 0 || spec.factors == Some(0) {
                return Err(Error::config("layer dims and factor counts must be >= 1"));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].output_len() != pair[1].input_len() {
                return Err(Error::config(format!(
                    "layer produces {} features but next layer expects {}",
                    pair[0].output_len(),
                    pair[1].input_len()
                )));
            }
        }
        let classes = layers.last().map(LayerSpec::output_len).unwrap_or(0);
        Ok(Self {
            name: name.into(),
            input_len,
            classes,
            layers,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist-mlp" => Ok(Self::mnist_mlp()),
            "fmnist-conv" => Ok(Self::fmnist_conv()),
            "cifar-conv" => Ok(Self::cifar_conv()),
            other => Err(Error::config(format!(
                "unknown model preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// 784–200–10 MLP, hidden layer factorized with `F = 120`.
    pub fn mnist_mlp() -> Self {
        Self::mlp("mnist-mlp", 784, &[200], 10, Some(120)).expect("valid preset")
    }

    /// Two same-padded 5×5 convs (16, 32 channels) with 2×2 pooling, then 1568→10.
    /// Only the convolutions are factorized, `F = 25`.
    pub fn fmnist_conv() -> Self {
        let g1 = ConvGeometry::new((1, 28, 28), (5, 5), 1, 2).expect("valid");
        let g2 = ConvGeometry::new((16, 14, 14), (5, 5), 1, 2).expect("valid");
        Self::new(
            "fmnist-conv",
            vec![
                LayerSpec::conv(g1, 16, 2, Some(25)),
                LayerSpec::conv(g2, 32, 2, Some(25)),
                LayerSpec::dense(32 * 7 * 7, 10, None, false),
            ],
        )
        .expect("valid preset")
    }

    /// Two unpadded 3×3 convs (16, 16 channels) with 2×2 pooling, dense 80 and 60,
    /// then a 10-way output. Factors `(10, 10, 80, 40)` on the first four layers.
    pub fn cifar_conv() -> Self {
        let g1 = ConvGeometry::new((3, 32, 32), (3, 3), 1, 0).expect("valid");
        let g2 = ConvGeometry::new((16, 15, 15), (3, 3), 1, 0).expect("valid");
        Self::new(
            "cifar-conv",
            vec![
                LayerSpec::conv(g1, 16, 2, Some(10)),
                LayerSpec::conv(g2, 16, 2, Some(10)),
                LayerSpec::dense(16 * 6 * 6, 80, Some(80), true),
                LayerSpec::dense(80, 60, Some(40), true),
                LayerSpec::dense(60, 10, None, false),
            ],
        )
        .expect("valid preset")
    }

    /// ReLU MLP whose hidden layers are factorized with `factors`; the output layer is dense.
    pub fn mlp(name: &str, input_len: usize, hidden: &[usize], classes: usize, factors: Option<usize>) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_len;
        for &h in hidden {
            layers.push(LayerSpec::dense(prev, h, factors, true));
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, classes, None, false));
        Self::new(name, layers)
    }

    /// The same architecture with every layer as a plain weight matrix.
    pub fn unfactorized(&self) -> Self {
        let mut out = self.clone();
        out.layers.iter_mut().for_each(|l| l.factors = None);
        out
    }

    /// Replaces `F` on the factorized layers, in order.
    pub fn with_factors(&self, factors: &[usize]) -> Result<Self> {
        let n = self.factorized_count();
        if factors.len() != n && factors.len() != 1 {
            return Err(Error::config(format!(
                "{} factor counts given for {n} factorized layers",
                factors.len()
            )));
        }
        let mut out = self.clone();
        for (i, layer) in out.layers.iter_mut().filter(|l| l.is_factorized()).enumerate() {
            let f = factors[if factors.len() == 1 { 0 } else { i }];
            if f == 0 {
                return Err(Error::config("factor counts must be >= 1"));
            }
            layer.factors = Some(f);
        }
        Ok(out)
    }

    pub fn factorized_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_factorized()).count()
    }

    /// Truncation levels of the factorized layers, in order.
    pub fn factor_counts(&self) -> Vec<usize> {
        self.layers.iter().filter_map(|l| l.factors).collect()
    }
}
