//! Shadow-model membership inference against intercepted client updates.
//!
//! The attacker sees one client's final update message. Under FedAvg that is
//! the full local model; under WAFFLe it is only the factor dictionary, which
//! the attacker completes with a fixed factor selection.

use log::warn;

use crate::data::{ClientData, GroupTag, LabeledDataset};
use crate::error::{Error, Result};
use crate::federation::{
    deserialize_update, evaluation_scores, run_training, Algorithm, ExecutionOrder, RoundConfig, RunOptions,
    UnqueriedEval, UpdateMessage,
};
use crate::model::{forward, FactorDictionary, FactorScores, ModelConfig};
use crate::rng::{purpose, RngStream};
use crate::tape::softmax_rows;
use crate::tensor::DenseMatrix;

/// A model as the attacker can query it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelView {
    pub model: ModelConfig,
    pub dict: FactorDictionary,
    pub scores: FactorScores,
}

impl ModelView {
    /// Row-wise class probabilities.
    pub fn predict_proba(&self, data: &LabeledDataset) -> Result<DenseMatrix> {
        let (x, _) = data.to_matrix();
        Ok(softmax_rows(&forward(&self.model, &self.dict, &self.scores, &x)?))
    }
}

/// Builds the attacker's view from an intercepted update alone.
///
/// `model` is the architecture the update was trained with; factorized layers
/// are completed according to `completion`.
pub fn view_from_message(
    msg: &UpdateMessage,
    model: &ModelConfig,
    completion: UnqueriedEval,
    cfg: &RoundConfig,
) -> Result<ModelView> {
    let dict = msg.to_dictionary(model)?;
    let completion_cfg = RoundConfig {
        unqueried: completion,
        ..cfg.clone()
    };
    let scores = evaluation_scores(model, None, msg.sender as usize, &completion_cfg);
    Ok(ModelView {
        model: model.clone(),
        dict,
        scores,
    })
}

/// Data for one federated pipeline. Client 0 is the one whose update is intercepted;
/// its training set is the "in" set and `out` holds same-distribution non-members.
#[derive(Clone, Debug)]
pub struct PipelineData {
    pub clients: Vec<ClientData>,
    pub out: LabeledDataset,
}

impl PipelineData {
    pub fn members(&self) -> &LabeledDataset {
        &self.clients[0].train
    }

    fn origins(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .clients
            .iter()
            .flat_map(|c| c.train.origin().iter().chain(c.test.origin()))
            .chain(self.out.origin())
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Cuts `pipelines` disjoint pipelines out of `pool`, each with `clients`
/// clients of `per_client` training examples and `per_client` non-members.
pub fn split_pipelines(
    pool: &LabeledDataset,
    pipelines: usize,
    clients: usize,
    per_client: usize,
    seed: u64,
) -> Result<Vec<PipelineData>> {
    let need = pipelines * (clients + 1) * per_client;
    if clients == 0 || per_client == 0 || need > pool.len() {
        return Err(Error::config(format!(
            "membership experiment needs {need} examples, pool has {}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    RngStream::new(seed, 0, 0, purpose::MIA).shuffle(&mut order);
    let mut chunks = order.chunks_exact(per_client);
    let empty = pool.subset(&[]);
    (0..pipelines)
        .map(|_| {
            let clients = (0..clients)
                .map(|id| ClientData {
                    id,
                    group: GroupTag::None,
                    train: pool.subset(chunks.next().expect("sized above")),
                    test: empty.clone(),
                    warnings: Vec::new(),
                })
                .collect();
            let out = pool.subset(chunks.next().expect("sized above"));
            Ok(PipelineData { clients, out })
        })
        .collect()
}

/// Trains one pipeline federated with every client each round and returns the
/// attacker's view of client 0's final-round update.
pub fn train_pipeline(
    model: &ModelConfig,
    cfg: &RoundConfig,
    data: &PipelineData,
    completion: UnqueriedEval,
) -> Result<ModelView> {
    let mut intercepted: Option<Vec<u8>> = None;
    let target = data.clients[0].id as u64;
    let mut tap = |bytes: &[u8]| {
        if let Ok(msg) = deserialize_update(bytes) {
            if msg.sender == target && msg.round == cfg.rounds as u64 {
                intercepted = Some(bytes.to_vec());
            }
        }
    };
    let full = RoundConfig {
        fraction: 1.0,
        ..cfg.clone()
    };
    let run = run_training(
        model,
        &full,
        &data.clients,
        RunOptions {
            order: ExecutionOrder::Sequential,
            tap: Some(&mut tap),
            skip_evaluation: true,
        },
    )?;
    let bytes = intercepted.ok_or_else(|| Error::contract("target update was never sent"))?;
    view_from_message(&deserialize_update(&bytes)?, &run.model, completion, cfg)
}

/// Trains each shadow pipeline; their data must be pairwise disjoint.
pub fn train_shadows(
    model: &ModelConfig,
    cfg: &RoundConfig,
    shadows: &[PipelineData],
    completion: UnqueriedEval,
) -> Result<Vec<ModelView>> {
    check_disjoint(shadows)?;
    shadows
        .iter()
        .enumerate()
        .map(|(k, data)| {
            let shadow_cfg = RoundConfig {
                seed: cfg.seed.wrapping_add(1 + k as u64),
                ..cfg.clone()
            };
            train_pipeline(model, &shadow_cfg, data, completion)
        })
        .collect()
}

fn check_disjoint(pipelines: &[PipelineData]) -> Result<()> {
    let mut all: Vec<usize> = pipelines.iter().flat_map(PipelineData::origins).collect();
    let n = all.len();
    all.sort_unstable();
    all.dedup();
    if all.len() != n {
        return Err(Error::config("shadow datasets overlap"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRow {
    /// Class probabilities in descending order.
    pub features: Vec<f64>,
    pub class: usize,
    pub member: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackDataset {
    pub rows: Vec<AttackRow>,
}

fn attack_rows(view: &ModelView, data: &LabeledDataset, member: bool) -> Result<Vec<AttackRow>> {
    let probs = view.predict_proba(data)?;
    Ok((0..data.len())
        .map(|i| {
            let mut features = probs.row(i).to_vec();
            features.sort_by(|a, b| b.total_cmp(a));
            AttackRow {
                features,
                class: data.labels()[i],
                member,
            }
        })
        .collect())
}

/// Labels each shadow's members and non-members with the shadow's own confidences.
pub fn build_attack_dataset(shadows: &[ModelView], data: &[PipelineData]) -> Result<AttackDataset> {
    if shadows.len() != data.len() {
        return Err(Error::contract("one dataset per shadow required"));
    }
    let mut rows = Vec::new();
    for (view, d) in shadows.iter().zip(data) {
        rows.extend(attack_rows(view, d.members(), true)?);
        rows.extend(attack_rows(view, &d.out, false)?);
    }
    Ok(AttackDataset { rows })
}

/// L2-regularized logistic regression on standardized features, fit by full-batch gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[bool], l2: f64, steps: usize, lr: f64) -> Result<Self> {
        let n = x.len();
        let dim = x.first().map_or(0, Vec::len);
        if n == 0 || y.len() != n || x.iter().any(|r| r.len() != dim) {
            return Err(Error::contract("logistic regression needs matching non-empty rows"));
        }
        let mean: Vec<f64> = (0..dim)
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        let mut model = Self {
            mean,
            scale,
            weights: vec![0.0; dim],
            bias: 0.0,
        };
        for _ in 0..steps {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (row, &label) in z.iter().zip(y) {
                let p = crate::tape::sigmoid(model.logit_standardized(row));
                let err = p - if label { 1.0 } else { 0.0 };
                gw.iter_mut().zip(row).for_each(|(g, v)| *g += err * v);
                gb += err;
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= lr * (g / n as f64 + l2 * *w);
            }
            model.bias -= lr * gb / n as f64;
        }
        Ok(model)
    }

    fn logit_standardized(&self, z: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        let z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        crate::tape::sigmoid(self.logit_standardized(&z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassAttackStats {
    pub class: usize,
    pub examples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub accuracy: f64,
    /// F1 with membership as the positive class.
    pub f1: f64,
    pub per_class: Vec<ClassAttackStats>,
    pub warnings: Vec<String>,
}

const L2: f64 = 1e-3;
const STEPS: usize = 300;
const STEP_SIZE: f64 = 0.5;

/// Trains one attack classifier per class on `attack` and scores membership of
/// `members` and `non_members` under `target`.
pub fn run_attack(
    attack: &AttackDataset,
    target: &ModelView,
    members: &LabeledDataset,
    non_members: &LabeledDataset,
) -> Result<AttackReport> {
    if attack.rows.is_empty() {
        return Err(Error::contract("empty attack dataset"));
    }
    let mut warnings = Vec::new();
    let (mut members, mut non_members) = (members.clone(), non_members.clone());
    if members.len() != non_members.len() {
        let k = members.len().min(non_members.len());
        let msg = format!(
            "unbalanced evaluation sets ({} in, {} out); subsampled to {k} each",
            members.len(),
            non_members.len()
        );
        warn!("{msg}");
        warnings.push(msg);
        let mut rng = RngStream::new(0, 0, 0, purpose::MIA);
        for set in [&mut members, &mut non_members] {
            let mut idx: Vec<usize> = (0..set.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
            *set = set.subset(&idx);
        }
    }
    if members.is_empty() {
        return Err(Error::contract("no evaluation examples"));
    }

    let fit = |rows: &[&AttackRow]| -> Result<LogisticModel> {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
        let y: Vec<bool> = rows.iter().map(|r| r.member).collect();
        LogisticModel::fit(&x, &y, L2, STEPS, STEP_SIZE)
    };
    let all: Vec<&AttackRow> = attack.rows.iter().collect();
    let fallback = fit(&all)?;
    let classes = members.classes();
    let per_class_models: Vec<Option<LogisticModel>> = (0..classes)
        .map(|c| {
            let rows: Vec<&AttackRow> = attack.rows.iter().filter(|r| r.class == c).collect();
            let has_both = rows.iter().any(|r| r.member) && rows.iter().any(|r| !r.member);
            if has_both {
                fit(&rows).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    let mut eval = attack_rows(target, &members, true)?;
    eval.extend(attack_rows(target, &non_members, false)?);
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    let mut class_hits = vec![(0usize, 0usize); classes];
    for row in &eval {
        let m = per_class_models[row.class].as_ref().unwrap_or(&fallback);
        let guess = m.probability(&row.features) > 0.5;
        let hit = guess == row.member;
        correct += usize::from(hit);
        class_hits[row.class].0 += 1;
        class_hits[row.class].1 += usize::from(hit);
        match (guess, row.member) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(AttackReport {
        accuracy: correct as f64 / eval.len() as f64,
        f1,
        per_class: class_hits
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| *n > 0)
            .map(|(class, &(n, h))| ClassAttackStats {
                class,
                examples: n,
                accuracy: h as f64 / n as f64,
            })
            .collect(),
        warnings,
    })
}

/// Settings of a complete attack experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct MiaConfig {
    pub shadows: usize,
    pub clients: usize,
    pub per_client: usize,
    pub completion: UnqueriedEval,
    pub seed: u64,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            shadows: 3,
            clients: 2,
            per_client: 200,
            completion: UnqueriedEval::AllOnes,
            seed: 0,
        }
    }
}

/// Trains target and shadows under `round.algorithm` and attacks the target's intercepted update.
pub fn run_membership_experiment(
    pool: &LabeledDataset,
    model: &ModelConfig,
    round: &RoundConfig,
    cfg: &MiaConfig,
) -> Result<AttackReport> {
    if cfg.shadows == 0 {
        return Err(Error::config("at least one shadow model is required"));
    }
    let mut pipelines = split_pipelines(pool, cfg.shadows + 1, cfg.clients, cfg.per_client, cfg.seed)?;
    let target_data = pipelines.remove(0);
    let shadows = train_shadows(model, round, &pipelines, cfg.completion)?;
    let attack = build_attack_dataset(&shadows, &pipelines)?;
    let target = train_pipeline(model, round, &target_data, cfg.completion)?;
    run_attack(&attack, &target, target_data.members(), &target_data.out)
}

/// Convenience for comparing algorithms on identical data.
pub fn compare_algorithms(
    pool: &LabeledDataset,
    model: &ModelConfig,
    round: &RoundConfig,
    cfg: &MiaConfig,
    algorithms: &[Algorithm],
) -> Result<Vec<(Algorithm, AttackReport)>> {
    algorithms
        .iter()
        .map(|&a| {
            let r = RoundConfig {
                algorithm: a,
                ..round.clone()
            };
            run_membership_experiment(pool, model, &r, cfg).map(|rep| (a, rep))
        })
        .collect()
}
