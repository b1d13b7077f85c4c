//! The algorithm family as pluggable client-round strategies.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{check_keep_rate, Error, Result};
use crate::masking::{ordered_mask, random_mask_with, DropoutMask, MaskMode, ScoreGrouping};
use crate::nn::{cnn_loss_gradient_on, mlp_forward_backward, sgd_step, CnnModel, MlpBatch, MlpLoss, MlpModel, PatchedDataset};
use crate::params::{ModelParams, ParamGroup, UnitMap};
use crate::sim::ClientProfile;
use crate::store::{GlobalStore, MergeOutcome, UpdateEnvelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    AsyncDrop,
    HeteroAsyncDrop,
    AsyncFedAvg,
    AsyncFedWeightedAvg,
    AsyncFedProx,
    AsyncFjord,
    FedBuff,
    SyncFedAvg,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::AsyncDrop,
        StrategyKind::HeteroAsyncDrop,
        StrategyKind::AsyncFedAvg,
        StrategyKind::AsyncFedWeightedAvg,
        StrategyKind::AsyncFedProx,
        StrategyKind::AsyncFjord,
        StrategyKind::FedBuff,
        StrategyKind::SyncFedAvg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::AsyncDrop => "asyncdrop",
            StrategyKind::HeteroAsyncDrop => "hetero-asyncdrop",
            StrategyKind::AsyncFedAvg => "async-fedavg",
            StrategyKind::AsyncFedWeightedAvg => "async-fed-weighted-avg",
            StrategyKind::AsyncFedProx => "async-fedprox",
            StrategyKind::AsyncFjord => "async-fjord",
            StrategyKind::FedBuff => "fedbuff",
            StrategyKind::SyncFedAvg => "sync-fedavg",
        }
    }

    /// Strategies that train and transfer a submodel.
    pub fn is_masked(self) -> bool {
        matches!(self, StrategyKind::AsyncDrop | StrategyKind::HeteroAsyncDrop | StrategyKind::AsyncFjord)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::config_key("strategy", format!("unknown strategy `{s}`")))
    }
}

pub fn parse_mask_mode(s: &str) -> Result<MaskMode> {
    let modes = [
        MaskMode::Bernoulli,
        MaskMode::ExactK,
        MaskMode::ScoreWindow,
        MaskMode::OrderedPrefix,
        MaskMode::Layerwise,
    ];
    let norm = s.trim().to_ascii_lowercase().replace('_', "-");
    modes
        .into_iter()
        .find(|m| m.as_str() == norm)
        .ok_or_else(|| Error::config_key("mask_mode", format!("unknown mask mode `{s}`")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub keep_rate: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub local_iters: usize,
    /// Proximal coefficient (FedProx).
    pub mu: f64,
    /// Buffer size (FedBuff).
    pub buffer_size: usize,
    /// Overrides the default mask mode of the masked strategies.
    pub mask_mode: Option<MaskMode>,
    /// Mini-batch size; `None` uses the whole shard every step.
    pub batch_size: Option<usize>,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            keep_rate: 0.75,
            alpha: 0.5,
            learning_rate: 0.05,
            local_iters: 50,
            mu: 0.0,
            buffer_size: 4,
            mask_mode: None,
            batch_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_keep_rate(self.keep_rate)?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config_key("alpha", format!("{} is outside (0, 1]", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config_key("learning_rate", "must be positive and finite"));
        }
        if self.local_iters == 0 {
            return Err(Error::config_key("local_iters", "must be at least 1"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config_key("mu", "must be non-negative"));
        }
        if self.buffer_size == 0 {
            return Err(Error::config_key("buffer_size", "must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config_key("batch_size", "must be at least 1"));
        }
        let mode = self.effective_mask_mode();
        let ok = match self.kind {
            StrategyKind::AsyncDrop => matches!(mode, MaskMode::Bernoulli | MaskMode::ExactK),
            StrategyKind::HeteroAsyncDrop => matches!(mode, MaskMode::ScoreWindow | MaskMode::Layerwise),
            StrategyKind::AsyncFjord => mode == MaskMode::OrderedPrefix,
            _ => true,
        };
        if !ok {
            return Err(Error::config_key(
                "mask_mode",
                format!("{} cannot be used with {}", mode.as_str(), self.kind),
            ));
        }
        Ok(())
    }

    pub fn effective_mask_mode(&self) -> MaskMode {
        self.mask_mode.unwrap_or(match self.kind {
            StrategyKind::HeteroAsyncDrop => MaskMode::ScoreWindow,
            StrategyKind::AsyncFjord => MaskMode::OrderedPrefix,
            _ => MaskMode::ExactK,
        })
    }

    /// Score grouping the store must track for this strategy, if any.
    pub fn score_grouping(&self, units: &UnitMap) -> Option<ScoreGrouping> {
        match (self.kind, self.effective_mask_mode()) {
            (StrategyKind::HeteroAsyncDrop, MaskMode::Layerwise) => Some(ScoreGrouping::Layers),
            (StrategyKind::HeteroAsyncDrop, _) => Some(ScoreGrouping::Units(units.clone())),
            _ => None,
        }
    }
}

/// Global-model evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// A model plus its training data, seen through flat parameters.
pub trait Task: Send + Sync {
    fn initial_params(&self) -> ModelParams;
    fn unit_map(&self) -> &UnitMap;
    fn num_samples(&self) -> usize;
    /// Data loss and gradient on the listed training samples. A unit mask trains the
    /// subnetwork; a layerwise mask freezes the dropped layers.
    fn loss_grad(&self, params: &ModelParams, indices: &[usize], mask: Option<&DropoutMask>) -> Result<(f64, ModelParams)>;
    fn evaluate(&self, params: &ModelParams) -> Result<Evaluation>;
}

fn freeze_layers(grad: &mut ModelParams, mask: &DropoutMask) -> Result<()> {
    if mask.len() != grad.groups.len() {
        return Err(Error::dim("layer mask does not match the model"));
    }
    for (g, &k) in grad.groups.iter_mut().zip(&mask.kept) {
        if !k {
            g.values.fill(0.0);
        }
    }
    Ok(())
}

/// Regression with the patched CNN (second layer fixed).
#[derive(Debug, Clone)]
pub struct CnnTask {
    pub model: CnnModel,
    pub train: PatchedDataset,
    pub test: Option<PatchedDataset>,
    units: UnitMap,
}

impl CnnTask {
    pub fn new(model: CnnModel, train: PatchedDataset, test: Option<PatchedDataset>) -> Self {
        let units = model.unit_map();
        Self { model, train, test, units }
    }

    fn with_params(&self, params: &ModelParams) -> Result<CnnModel> {
        let mut m = self.model.clone();
        m.set_params(params)?;
        Ok(m)
    }
}

impl Task for CnnTask {
    fn initial_params(&self) -> ModelParams {
        self.model.params()
    }

    fn unit_map(&self) -> &UnitMap {
        &self.units
    }

    fn num_samples(&self) -> usize {
        self.train.len()
    }

    fn loss_grad(&self, params: &ModelParams, indices: &[usize], mask: Option<&DropoutMask>) -> Result<(f64, ModelParams)> {
        let model = self.with_params(params)?;
        let unit_mask = mask.filter(|m| m.mode != MaskMode::Layerwise);
        let (loss, g) = cnn_loss_gradient_on(&model, &self.train, indices, unit_mask)?;
        let (m, d) = g.dim();
        let mut grad = ModelParams::new(vec![ParamGroup::new(crate::nn::CNN_FILTERS, vec![m, d], g.into_raw_vec_and_offset().0)?]);
        if let Some(lm) = mask.filter(|m| m.mode == MaskMode::Layerwise) {
            freeze_layers(&mut grad, lm)?;
        }
        Ok((loss, grad))
    }

    fn evaluate(&self, params: &ModelParams) -> Result<Evaluation> {
        let model = self.with_params(params)?;
        let all: Vec<usize> = (0..self.train.len()).collect();
        let (train_loss, _) = cnn_loss_gradient_on(&model, &self.train, &all, None)?;
        let test_loss = match &self.test {
            Some(t) => {
                let idx: Vec<usize> = (0..t.len()).collect();
                Some(cnn_loss_gradient_on(&model, t, &idx, None)?.0)
            }
            None => None,
        };
        Ok(Evaluation { train_loss, test_loss, test_accuracy: None })
    }
}

/// Classification with the two-layer MLP on one-hot targets.
#[derive(Debug, Clone)]
pub struct MlpTask {
    pub model: MlpModel,
    pub loss: MlpLoss,
    train_x: Array2<f64>,
    train_y: Array2<f64>,
    test: Option<(Array2<f64>, Array2<f64>, Vec<usize>)>,
    units: UnitMap,
}

fn one_hot(data: &Dataset) -> Result<(Array2<f64>, Vec<usize>)> {
    let labels = data
        .class_labels()
        .ok_or_else(|| Error::dim("the MLP needs class labels"))?
        .to_vec();
    let c = data.num_classes().unwrap_or(0);
    let mut y = Array2::zeros((labels.len(), c));
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    Ok((y, labels))
}

impl MlpTask {
    pub fn new(model: MlpModel, loss: MlpLoss, train: &Dataset, test: Option<&Dataset>) -> Result<Self> {
        let (train_y, _) = one_hot(train)?;
        if train.dim() != model.input() || train_y.ncols() != model.output() {
            return Err(Error::dim("dataset does not match the MLP shape"));
        }
        let test = match test {
            Some(t) => {
                let (y, labels) = one_hot(t)?;
                Some((t.features.clone(), y, labels))
            }
            None => None,
        };
        let units = model.unit_map();
        Ok(Self { model, loss, train_x: train.features.clone(), train_y, test, units })
    }

    fn with_params(&self, params: &ModelParams) -> Result<MlpModel> {
        let mut m = self.model.clone();
        m.set_params(params)?;
        Ok(m)
    }
}

fn accuracy(model: &MlpModel, x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let out = model.predict(x.view(), None)?;
    let hits = out
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == l
        })
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

impl Task for MlpTask {
    fn initial_params(&self) -> ModelParams {
        self.model.params()
    }

    fn unit_map(&self) -> &UnitMap {
        &self.units
    }

    fn num_samples(&self) -> usize {
        self.train_x.nrows()
    }

    fn loss_grad(&self, params: &ModelParams, indices: &[usize], mask: Option<&DropoutMask>) -> Result<(f64, ModelParams)> {
        let model = self.with_params(params)?;
        let x = self.train_x.select(Axis(0), indices);
        let y = self.train_y.select(Axis(0), indices);
        let batch = MlpBatch { inputs: x.view(), targets: y.view() };
        let unit_mask = mask.filter(|m| m.mode != MaskMode::Layerwise);
        let (loss, g) = mlp_forward_backward(&model, batch, unit_mask, self.loss)?;
        let mut grad = model.params();
        grad.groups[0].values = g.w1.iter().copied().collect();
        grad.groups[1].values = g.w2.iter().copied().collect();
        if let Some(lm) = mask.filter(|m| m.mode == MaskMode::Layerwise) {
            freeze_layers(&mut grad, lm)?;
        }
        Ok((loss, grad))
    }

    fn evaluate(&self, params: &ModelParams) -> Result<Evaluation> {
        let model = self.with_params(params)?;
        let all = MlpBatch { inputs: self.train_x.view(), targets: self.train_y.view() };
        let (train_loss, _) = mlp_forward_backward(&model, all, None, self.loss)?;
        let (test_loss, test_accuracy) = match &self.test {
            Some((x, y, labels)) => {
                let b = MlpBatch { inputs: x.view(), targets: y.view() };
                let (l, _) = mlp_forward_backward(&model, b, None, self.loss)?;
                (Some(l), Some(accuracy(&model, x, labels)?))
            }
            None => (None, None),
        };
        Ok(Evaluation { train_loss, test_loss, test_accuracy })
    }
}

/// Resources one round consumed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReceipt {
    pub params_down: u64,
    pub params_up: u64,
    /// Fraction of model coordinates in the submodel.
    pub kept_fraction: f64,
    /// `l × kept_fraction`.
    pub compute_units: f64,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub envelope: UpdateEnvelope,
    pub receipt: CostReceipt,
    /// Data loss of the submodel at the start of the round.
    pub local_loss: f64,
    /// Training samples touched across all local steps.
    pub samples_processed: usize,
}

/// `data_loss + (μ/2)·‖W_i − W_fetched‖²`.
pub fn proximal_objective(mu: f64, data_loss: f64, sq_distance: f64) -> f64 {
    if mu == 0.0 {
        data_loss
    } else {
        data_loss + 0.5 * mu * sq_distance
    }
}

/// The scalar objective a strategy's local steps descend.
pub fn local_objective(
    spec: &StrategySpec,
    task: &dyn Task,
    local: &ModelParams,
    fetched: &ModelParams,
    indices: &[usize],
    mask: Option<&DropoutMask>,
) -> Result<f64> {
    let (data_loss, _) = task.loss_grad(local, indices, mask)?;
    match spec.kind {
        StrategyKind::AsyncFedProx => Ok(proximal_objective(spec.mu, data_loss, local.sq_distance(fetched))),
        _ => Ok(data_loss),
    }
}

/// Chooses the submodel mask for a client round.
pub fn mask_for_round(
    spec: &StrategySpec,
    client: &ClientProfile,
    levels: usize,
    store: &GlobalStore,
    rng: &mut ChaCha8Rng,
) -> Result<DropoutMask> {
    let units = store.unit_map().num_units();
    match spec.kind {
        StrategyKind::AsyncDrop => random_mask_with(rng, units, spec.keep_rate, spec.effective_mask_mode()),
        StrategyKind::HeteroAsyncDrop => {
            let table = store
                .scores()
                .ok_or_else(|| Error::Contract("heterogeneous masks need a score table on the store".into()))?;
            table.mask_for(client.capacity_level, levels, spec.keep_rate)
        }
        StrategyKind::AsyncFjord => ordered_mask(units, client.capacity_level, levels),
        _ => Ok(DropoutMask::all_kept(units, MaskMode::ExactK)),
    }
}

/// Fetch, mask, `l` local SGD steps on the shard restricted to the submodel, and wrap
/// the result for write-back.
pub fn client_round(
    spec: &StrategySpec,
    client: &ClientProfile,
    levels: usize,
    store: &GlobalStore,
    task: &dyn Task,
    shard: &[usize],
    seed: u64,
) -> Result<RoundResult> {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
    mask_rng.set_stream(1);
    let fetched = store.fetch();
    let mask = mask_for_round(spec, client, levels, store, &mut mask_rng)?;
    if spec.kind == StrategyKind::HeteroAsyncDrop && client.capacity_level == 1 {
        log::debug!("fastest-level learning rate left unchanged at {}", spec.learning_rate);
    }
    local_round(spec, client.id, fetched, mask, store.unit_map(), task, shard, seed)
}

/// Local training from an already fetched snapshot and a chosen mask.
#[allow(clippy::too_many_arguments)]
pub fn local_round(
    spec: &StrategySpec,
    client_id: usize,
    fetched: ModelParams,
    mask: DropoutMask,
    unit_map: &UnitMap,
    task: &dyn Task,
    shard: &[usize],
    seed: u64,
) -> Result<RoundResult> {
    if shard.is_empty() {
        return Err(Error::config(format!("client {client_id} has an empty shard")));
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    batch_rng.set_stream(2);
    let base_version = fetched.version;
    let coord_mask = unit_map.expand(&mask)?;
    let kept = coord_mask.count_kept();
    if kept == 0 {
        return Err(Error::DegenerateMask(format!("client {client_id} received an empty submodel")));
    }
    let train_mask = (!mask.is_all_kept()).then_some(&mask);
    let prox = spec.kind == StrategyKind::AsyncFedProx && spec.mu != 0.0;

    let mut local = fetched.clone();
    let mut order: Vec<usize> = shard.to_vec();
    let mut cursor = order.len();
    let mut first_loss = None;
    let mut samples = 0;
    for _ in 0..spec.local_iters {
        let batch: Vec<usize> = match spec.batch_size {
            None => shard.to_vec(),
            Some(b) => {
                let b = b.min(order.len());
                if cursor + b > order.len() {
                    order.shuffle(&mut batch_rng);
                    cursor = 0;
                }
                cursor += b;
                order[cursor - b..cursor].to_vec()
            }
        };
        samples += batch.len();
        let (loss, mut grad) = task.loss_grad(&local, &batch, train_mask)?;
        first_loss.get_or_insert(loss);
        if prox {
            for ((g, w), w0) in grad.groups.iter_mut().zip(&local.groups).zip(&fetched.groups) {
                for ((gv, &wv), &w0v) in g.values.iter_mut().zip(&w.values).zip(&w0.values) {
                    *gv += spec.mu * (wv - w0v);
                }
            }
            coord_mask.project(&mut grad);
        }
        for (w, g) in local.groups.iter_mut().zip(&grad.groups) {
            sgd_step(&mut w.values, &g.values, spec.learning_rate)?;
        }
    }
    let total = coord_mask.len();
    let kept_fraction = kept as f64 / total as f64;
    let receipt = CostReceipt {
        params_down: kept as u64,
        params_up: kept as u64,
        kept_fraction,
        compute_units: spec.local_iters as f64 * kept_fraction,
    };
    let envelope = UpdateEnvelope::new(client_id, mask, local, base_version, unit_map)?.with_strategy(spec.kind);
    Ok(RoundResult { envelope, receipt, local_loss: first_loss.unwrap_or(0.0), samples_processed: samples })
}

/// Routes envelopes to the merge rule of a strategy. Synchronous FedAvg holds updates
/// until `barrier` of them arrived and then replaces the model with their average.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub spec: StrategySpec,
    barrier: usize,
    pending: Vec<UpdateEnvelope>,
}

impl Aggregator {
    pub fn new(spec: StrategySpec, barrier: usize) -> Self {
        Self { spec, barrier: barrier.max(1), pending: Vec::new() }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn merge_for(&mut self, store: &mut GlobalStore, env: &mut UpdateEnvelope) -> Result<MergeOutcome> {
        if env.strategy.is_some_and(|k| k != self.spec.kind) {
            return Err(Error::Contract(format!(
                "{} envelope sent to the {} merge path",
                env.strategy.map(|k| k.as_str()).unwrap_or("untagged"),
                self.spec.kind
            )));
        }
        let alpha = self.spec.alpha;
        match self.spec.kind {
            StrategyKind::AsyncDrop | StrategyKind::HeteroAsyncDrop | StrategyKind::AsyncFjord => {
                store.masked_merge(env, alpha).map(MergeOutcome::Committed)
            }
            StrategyKind::AsyncFedAvg | StrategyKind::AsyncFedProx => store.plain_merge(env, alpha).map(MergeOutcome::Committed),
            StrategyKind::AsyncFedWeightedAvg => store.weighted_merge(env, alpha).map(MergeOutcome::Committed),
            StrategyKind::FedBuff => store.buffered_merge(env, self.spec.buffer_size, alpha),
            StrategyKind::SyncFedAvg => {
                if env.base_version != store.version() {
                    return Err(Error::Contract("synchronous update from an older round".into()));
                }
                env.staleness = Some(0);
                self.pending.push(env.clone());
                if self.pending.len() < self.barrier {
                    return Ok(MergeOutcome::Buffered { pending: self.pending.len() });
                }
                let mut batch = std::mem::take(&mut self.pending);
                store.group_averaged_merge(&mut batch, 1.0).map(MergeOutcome::Committed)
            }
        }
    }
}
