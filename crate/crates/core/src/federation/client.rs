use crate::data::{ClientData, LabeledDataset};
use crate::error::{Error, Result};
use crate::federation::{GlobalState, RoundConfig};
use crate::ibp::{elbo_loss, ClientVariationalState, LayerNoise};
use crate::model::{forward_on_tape, FactorScores, LayerVars, ModelConfig};
use crate::optim::sgd_step;
use crate::rng::{purpose, RngStream};
use crate::tape::{Tape, Var};
use crate::tensor::DenseMatrix;

/// Shuffled minibatch index lists for one epoch; the last batch may be short.
fn minibatches(n: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn check_train(data: &ClientData) -> Result<&LabeledDataset> {
    if data.train.is_empty() {
        return Err(Error::config(format!("client {} has no training data", data.id)));
    }
    Ok(&data.train)
}

fn check_finite(tensors: &[&DenseMatrix], client: usize) -> Result<()> {
    if tensors.iter().all(|t| t.is_finite()) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "client {client}: training diverged to non-finite values"
        )))
    }
}

/// `E` local epochs of minibatch SGD on the negative ELBO, updating both the
/// received global parameters and the client's own variational state.
pub fn waffle_client_update(
    model: &ModelConfig,
    globals: &GlobalState,
    varstate: &ClientVariationalState,
    data: &ClientData,
    cfg: &RoundConfig,
) -> Result<(GlobalState, ClientVariationalState)> {
    let train = check_train(data)?;
    let mut dict = globals.dict.clone();
    let mut vs = varstate.clone();
    let round = globals.round as u64;
    let client = data.id as u64;
    let mut order_rng = RngStream::new(cfg.seed, round, client, purpose::SHUFFLE);
    let mut noise_rng = RngStream::new(cfg.seed, round, client, purpose::NOISE);
    let n = train.len() as f64;
    for _ in 0..cfg.local_epochs {
        for batch in minibatches(train.len(), cfg.batch_size, &mut order_rng) {
            let (x, y) = train.batch(&batch);
            let noise = LayerNoise::draw(model, &mut noise_rng);
            let kl_scale = cfg.kl_weight * batch.len() as f64 / n;
            let (global_grads, local_grads) = {
                let mut tape = Tape::new();
                let g = elbo_loss(
                    &mut tape,
                    model,
                    &dict,
                    &vs,
                    x,
                    &y,
                    &cfg.prior,
                    &cfg.relaxation,
                    kl_scale,
                    &noise,
                )?;
                let params: Vec<Var> = g.global_params.iter().chain(&g.local_params).copied().collect();
                let mut grads = tape.gradients(g.loss, &params)?;
                let local = grads.split_off(g.global_params.len());
                (grads, local)
            };
            sgd_step(&mut dict.tensors_mut(), &global_grads, cfg.lr)?;
            sgd_step(&mut vs.tensors_mut(), &local_grads, cfg.lr)?;
        }
    }
    check_finite(&dict.tensors(), data.id)?;
    Ok((
        GlobalState {
            dict,
            round: globals.round,
        },
        vs,
    ))
}

/// `E` local epochs of minibatch SGD on cross-entropy. Factorized layers, if
/// the model has any, run with every factor active.
pub fn fedavg_client_update(
    model: &ModelConfig,
    globals: &GlobalState,
    data: &ClientData,
    cfg: &RoundConfig,
) -> Result<GlobalState> {
    sgd_client_update(model, globals, data, cfg, 0.0)
}

/// As [`fedavg_client_update`] with the proximal penalty `(μ/2)·‖θ − θ_start‖²`.
pub fn fedprox_client_update(
    model: &ModelConfig,
    globals: &GlobalState,
    data: &ClientData,
    cfg: &RoundConfig,
) -> Result<GlobalState> {
    sgd_client_update(model, globals, data, cfg, cfg.mu)
}

fn sgd_client_update(
    model: &ModelConfig,
    globals: &GlobalState,
    data: &ClientData,
    cfg: &RoundConfig,
    mu: f64,
) -> Result<GlobalState> {
    let train = check_train(data)?;
    globals.dict.check_compatible(model)?;
    let mut dict = globals.dict.clone();
    let start = &globals.dict;
    let ones = FactorScores::ones(model);
    let mut order_rng = RngStream::new(cfg.seed, globals.round as u64, data.id as u64, purpose::SHUFFLE);
    for _ in 0..cfg.local_epochs {
        for batch in minibatches(train.len(), cfg.batch_size, &mut order_rng) {
            let (x, y) = train.batch(&batch);
            let mut grads = {
                let mut tape = Tape::new();
                let vars = LayerVars::bind(&mut tape, &dict, true);
                let params = LayerVars::flatten(&vars);
                let scores: Vec<Var> = ones
                    .layers
                    .iter()
                    .map(|b| tape.constant_owned(DenseMatrix::row_vector(b.clone())))
                    .collect();
                let input = tape.constant_owned(x);
                let logits = forward_on_tape(&mut tape, model, &vars, &scores, input)?;
                let loss = tape.softmax_cross_entropy(logits, &y)?;
                tape.gradients(loss, &params)?
            };
            if mu != 0.0 {
                // Gradient of (μ/2)·‖θ − θ_start‖².
                for ((g, p), a) in grads.iter_mut().zip(dict.tensors()).zip(start.tensors()) {
                    for ((gv, &pv), &av) in g.as_mut_slice().iter_mut().zip(p.as_slice()).zip(a.as_slice()) {
                        *gv += mu * (pv - av);
                    }
                }
            }
            sgd_step(&mut dict.tensors_mut(), &grads, cfg.lr)?;
        }
    }
    check_finite(&dict.tensors(), data.id)?;
    Ok(GlobalState {
        dict,
        round: globals.round,
    })
}
