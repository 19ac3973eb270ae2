use crate::error::Result;
use crate::model::{FactorDictionary, FactorScores, LayerKind, LayerParams, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::DenseMatrix;

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub enum LayerVars {
    Factorized { w_a: Var, w_b: Var, r: Var },
    Dense { w: Var },
}

impl LayerVars {
    /// Places every tensor of `dict` on the tape, as trainable leaves or constants.
    pub fn bind<'a>(tape: &mut Tape<'a>, dict: &'a FactorDictionary, trainable: bool) -> Vec<LayerVars> {
        let mut leaf = |t: &'a DenseMatrix| if trainable { tape.param(t) } else { tape.constant(t) };
        dict.layers
            .iter()
            .map(|layer| match layer {
                LayerParams::Factorized { w_a, w_b, r } => LayerVars::Factorized {
                    w_a: leaf(w_a),
                    w_b: leaf(w_b),
                    r: leaf(r),
                },
                LayerParams::Dense { w } => LayerVars::Dense { w: leaf(w) },
            })
            .collect()
    }

    /// Handles in the order of [`FactorDictionary::tensors`].
    pub fn flatten(vars: &[LayerVars]) -> Vec<Var> {
        vars.iter()
            .flat_map(|v| match *v {
                LayerVars::Factorized { w_a, w_b, r } => vec![w_a, w_b, r],
                LayerVars::Dense { w } => vec![w],
            })
            .collect()
    }
}

/// Logits for a `B × input_len` batch. `scores` holds one `1 × F` handle per
/// factorized layer.
///
/// Factorized layers are applied as `W_a · ((r ⊙ b) ⊙ (W_b · h))` without forming `W`.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    model: &ModelConfig,
    vars: &[LayerVars],
    scores: &[Var],
    x: Var,
) -> Result<Var> {
    let mut h = x;
    let mut next_score = scores.iter();
    for (spec, layer) in model.layers.iter().zip(vars) {
        let rows = match spec.kind {
            LayerKind::Dense => h,
            LayerKind::Conv { geom, .. } => tape.im2row(h, geom)?,
        };
        let mut out = match *layer {
            LayerVars::Factorized { w_a, w_b, r } => {
                let b = *next_score
                    .next()
                    .ok_or_else(|| crate::error::Error::contract("fewer score vectors than factorized layers"))?;
                let lambda = tape.mul(r, b)?;
                let coded = tape.matmul_nt(rows, w_b)?;
                let selected = tape.mul_row(coded, lambda)?;
                tape.matmul_nt(selected, w_a)?
            }
            LayerVars::Dense { w } => tape.matmul_nt(rows, w)?,
        };
        if let LayerKind::Conv { geom, .. } = spec.kind {
            out = tape.patches_to_channels(out, geom.pixels())?;
        }
        if spec.relu {
            out = tape.relu(out);
        }
        if let LayerKind::Conv { geom, pool } = spec.kind {
            if pool > 1 {
                out = tape.max_pool(out, (spec.out_dim, geom.out_h(), geom.out_w()), pool)?;
            }
        }
        h = out;
    }
    Ok(h)
}

/// Inference-only forward pass.
pub fn forward(
    model: &ModelConfig,
    dict: &FactorDictionary,
    scores: &FactorScores,
    x: &DenseMatrix,
) -> Result<DenseMatrix> {
    dict.check_compatible(model)?;
    scores.check_compatible(model)?;
    let mut tape = Tape::new();
    let vars = LayerVars::bind(&mut tape, dict, false);
    let score_vars: Vec<Var> = scores
        .layers
        .iter()
        .map(|b| tape.constant_owned(DenseMatrix::row_vector(b.clone())))
        .collect();
    let input = tape.constant(x);
    let logits = forward_on_tape(&mut tape, model, &vars, &score_vars, input)?;
    Ok(tape.value(logits).clone())
}

/// Arg-max class per row; ties resolve to the lowest index.
pub fn predict(logits: &DenseMatrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

/// `W_a · diag(r ⊙ b) · W_b`.
pub fn compose_weight(w_a: &DenseMatrix, r: &[f64], b: &[f64], w_b: &DenseMatrix) -> Result<DenseMatrix> {
    let f = w_a.cols();
    if w_b.rows() != f || r.len() != f || b.len() != f {
        return Err(crate::error::Error::shape(format!(
            "compose: w_a {:?}, w_b {:?}, |r| = {}, |b| = {}",
            w_a.shape(),
            w_b.shape(),
            r.len(),
            b.len()
        )));
    }
    let scaled = DenseMatrix::from_fn(f, w_b.cols(), |k, m| r[k] * b[k] * w_b.get(k, m));
    w_a.matmul(&scaled)
}
