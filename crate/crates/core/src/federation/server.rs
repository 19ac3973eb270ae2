use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use log::info;
use rayon::prelude::*;

use crate::data::{ClientData, GroupTag};
use crate::error::{Error, Result};
use crate::federation::client::{fedavg_client_update, fedprox_client_update, waffle_client_update};
use crate::federation::wire::{deserialize_update, serialize_update};
use crate::federation::{Algorithm, GlobalState, RoundConfig, UnqueriedEval};
use crate::ibp::ClientVariationalState;
use crate::metrics::{group_mean, mean_local_accuracy, ClientEvalRecord};
use crate::model::{forward, predict, FactorDictionary, FactorScores, ModelConfig};
use crate::rng::{purpose, RngStream};

const EVAL_BATCH: usize = 256;

/// Order in which a round's client updates execute. Results are aggregated in
/// client-id order regardless.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExecutionOrder {
    #[default]
    Parallel,
    Sequential,
    /// Sequential, in an order shuffled per round by this seed.
    Shuffled(u64),
}

/// Receives the bytes of every client→server message.
pub type MessageTap<'t> = &'t mut dyn FnMut(&[u8]);

/// Hooks into a training run.
#[derive(Default)]
pub struct RunOptions<'t> {
    pub order: ExecutionOrder,
    pub tap: Option<MessageTap<'t>>,
    /// Skip client evaluation entirely.
    pub skip_evaluation: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundEvaluation {
    pub clients: Vec<ClientEvalRecord>,
    pub mean: f64,
    pub majority: Option<f64>,
    pub minority: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub evaluation: Option<RoundEvaluation>,
    pub wall_time: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub rounds: Vec<RoundRecord>,
}

impl TrainingHistory {
    /// The most recent round that was evaluated.
    pub fn last_evaluation(&self) -> Option<(usize, &RoundEvaluation)> {
        self.rounds
            .iter()
            .rev()
            .find_map(|r| r.evaluation.as_ref().map(|e| (r.round, e)))
    }
}

pub struct TrainingRun {
    /// The architecture actually trained: factorized for WAFFLe, dense for the baselines.
    pub model: ModelConfig,
    pub globals: GlobalState,
    /// Variational state of every client that has been selected at least once.
    pub varstates: BTreeMap<usize, ClientVariationalState>,
    pub history: TrainingHistory,
}

/// The architecture `algorithm` trains.
pub fn effective_model(model: &ModelConfig, algorithm: Algorithm) -> ModelConfig {
    match algorithm {
        Algorithm::Waffle => model.clone(),
        Algorithm::FedAvg | Algorithm::FedProx => model.unfactorized(),
    }
}

/// `⌈C·N⌉` distinct client positions, ascending.
pub fn sample_clients(n: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let m = ((fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut rng = RngStream::new(seed, round as u64, u64::MAX, purpose::SAMPLING);
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        ids.swap(i, j);
    }
    let mut chosen = ids[..m].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Weighted average of every tensor, accumulated in the given order.
pub fn aggregate_mean(updates: &[FactorDictionary], weights: &[f64]) -> Result<FactorDictionary> {
    let first = updates
        .first()
        .ok_or_else(|| Error::contract("no updates to aggregate"))?;
    if weights.len() != updates.len() {
        return Err(Error::contract(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::contract("aggregation weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::contract("aggregation weights sum to zero"));
    }
    let shapes: Vec<_> = first.tensors().iter().map(|t| t.shape()).collect();
    for u in updates {
        let s: Vec<_> = u.tensors().iter().map(|t| t.shape()).collect();
        let same_kind = u.layers.len() == first.layers.len()
            && u.layers
                .iter()
                .zip(&first.layers)
                .all(|(a, b)| std::mem::discriminant(a) == std::mem::discriminant(b));
        if s != shapes || !same_kind {
            return Err(Error::Consistency("updates have mismatched parameter shapes".into()));
        }
    }
    let mut out = first.zeros_like();
    for (u, &w) in updates.iter().zip(weights) {
        let p = w / total;
        for (acc, t) in out.tensors_mut().into_iter().zip(u.tensors()) {
            for (a, v) in acc.as_mut_slice().iter_mut().zip(t.as_slice()) {
                *a += p * v;
            }
        }
    }
    Ok(out)
}

/// Factor selections a client evaluates with: its hardened posterior if it has
/// one, otherwise all-ones or a prior draw according to `cfg`.
pub fn evaluation_scores(
    model: &ModelConfig,
    varstate: Option<&ClientVariationalState>,
    client: usize,
    cfg: &RoundConfig,
) -> FactorScores {
    if let Some(vs) = varstate {
        return vs.hardened_scores(cfg.relaxation.hard_threshold);
    }
    match cfg.unqueried {
        UnqueriedEval::AllOnes => FactorScores::ones(model),
        UnqueriedEval::PriorSample => {
            let mut rng = RngStream::new(cfg.seed, 0, client as u64, purpose::EVAL);
            let layers = model
                .factor_counts()
                .into_iter()
                .map(|f| {
                    let alpha = cfg.prior.alpha_for(f);
                    let mut pi = 1.0;
                    (0..f)
                        .map(|_| {
                            // Beta(α, 1) by inversion: v = u^(1/α).
                            pi *= rng.uniform().powf(1.0 / alpha);
                            if rng.uniform() < pi {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            FactorScores { layers }
        }
    }
}

/// Fraction of the client's local test set classified correctly.
pub fn evaluate_client(
    model: &ModelConfig,
    globals: &GlobalState,
    varstate: Option<&ClientVariationalState>,
    data: &ClientData,
    cfg: &RoundConfig,
) -> Result<f64> {
    if data.test.is_empty() {
        return Err(Error::config(format!("client {} has no test data", data.id)));
    }
    let scores = evaluation_scores(model, varstate, data.id, cfg);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.test.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.test.batch(chunk);
        let logits = forward(model, &globals.dict, &scores, &x)?;
        correct += predict(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.test.len() as f64)
}

/// Output of one client's local work: the encoded update and its new private state.
struct ClientResult {
    position: usize,
    bytes: Vec<u8>,
    varstate: Option<ClientVariationalState>,
}

fn run_client(
    model: &ModelConfig,
    globals: &GlobalState,
    varstate: Option<&ClientVariationalState>,
    data: &ClientData,
    cfg: &RoundConfig,
    position: usize,
) -> Result<ClientResult> {
    let (update, varstate) = match cfg.algorithm {
        Algorithm::Waffle => {
            let fresh;
            let vs = match varstate {
                Some(v) => v,
                None => {
                    fresh = ClientVariationalState::init(model, &cfg.prior);
                    &fresh
                }
            };
            let (g, v) = waffle_client_update(model, globals, vs, data, cfg)?;
            (g, Some(v))
        }
        Algorithm::FedAvg => (fedavg_client_update(model, globals, data, cfg)?, None),
        Algorithm::FedProx => (fedprox_client_update(model, globals, data, cfg)?, None),
    };
    Ok(ClientResult {
        position,
        bytes: serialize_update(&update.dict, data.id as u64, globals.round as u64),
        varstate,
    })
}

fn evaluate_all(
    model: &ModelConfig,
    globals: &GlobalState,
    varstates: &BTreeMap<usize, ClientVariationalState>,
    clients: &[ClientData],
    cfg: &RoundConfig,
    parallel: bool,
) -> Result<RoundEvaluation> {
    let eval = |c: &ClientData| -> Result<ClientEvalRecord> {
        let accuracy = evaluate_client(model, globals, varstates.get(&c.id), c, cfg)?;
        Ok(ClientEvalRecord {
            client_id: c.id,
            group: c.group,
            accuracy,
        })
    };
    let records: Vec<ClientEvalRecord> = if parallel {
        clients.par_iter().map(eval).collect::<Result<_>>()?
    } else {
        clients.iter().map(eval).collect::<Result<_>>()?
    };
    Ok(RoundEvaluation {
        mean: mean_local_accuracy(&records)?,
        majority: group_mean(&records, GroupTag::Majority),
        minority: group_mean(&records, GroupTag::Minority),
        clients: records,
    })
}

/// Runs `cfg.rounds` synchronous rounds: sample clients, update locally, encode,
/// decode at the server and average in client-id order.
pub fn run_training(
    model: &ModelConfig,
    cfg: &RoundConfig,
    clients: &[ClientData],
    mut options: RunOptions<'_>,
) -> Result<TrainingRun> {
    cfg.validate(clients.len())?;
    let mut ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != clients.len() {
        return Err(Error::config("client ids must be distinct"));
    }
    let model = effective_model(model, cfg.algorithm);
    let mut globals = GlobalState {
        dict: FactorDictionary::init(&model, cfg.seed),
        round: 0,
    };
    let mut varstates: BTreeMap<usize, ClientVariationalState> = BTreeMap::new();
    let mut history = TrainingHistory::default();
    let parallel = options.order == ExecutionOrder::Parallel;

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let mut selected = sample_clients(clients.len(), cfg.fraction, cfg.seed, round);
        // Positions are sorted; reorder by client id so aggregation follows id order.
        selected.sort_by_key(|&p| clients[p].id);
        globals.round = round;
        let snapshot = &globals;
        let job = |&p: &usize| run_client(&model, snapshot, varstates.get(&clients[p].id), &clients[p], cfg, p);
        let mut results: Vec<ClientResult> = match options.order {
            ExecutionOrder::Parallel => selected.par_iter().map(job).collect::<Result<_>>()?,
            ExecutionOrder::Sequential => selected.iter().map(job).collect::<Result<_>>()?,
            ExecutionOrder::Shuffled(seed) => {
                let mut order = selected.clone();
                RngStream::new(seed, round as u64, 0, purpose::SAMPLING).shuffle(&mut order);
                order.iter().map(job).collect::<Result<_>>()?
            }
        };
        results.sort_by_key(|r| clients[r.position].id);

        let mut updates = Vec::with_capacity(results.len());
        let mut weights = Vec::with_capacity(results.len());
        for r in results {
            if let Some(tap) = options.tap.as_mut() {
                tap(&r.bytes);
            }
            let msg = deserialize_update(&r.bytes)?;
            updates.push(msg.to_dictionary(&model)?);
            weights.push(cfg.client_weights.as_ref().map_or(1.0, |w| w[r.position]));
            if let Some(v) = r.varstate {
                varstates.insert(clients[r.position].id, v);
            }
        }
        globals.dict = aggregate_mean(&updates, &weights)?;

        let due = round == cfg.rounds || (cfg.eval_every > 0 && round % cfg.eval_every == 0);
        let evaluation = if due && !options.skip_evaluation {
            let e = evaluate_all(&model, &globals, &varstates, clients, cfg, parallel)?;
            info!("round {round}: mean local accuracy {:.4}", e.mean);
            Some(e)
        } else {
            None
        };
        history.rounds.push(RoundRecord {
            round,
            selected: selected.iter().map(|&p| clients[p].id).collect(),
            evaluation,
            wall_time: started.elapsed(),
        });
    }
    Ok(TrainingRun {
        model,
        globals,
        varstates,
        history,
    })
}
