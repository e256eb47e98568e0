//! Iterative lottery-ticket training: a dense seed round, then repeated
//! prune / re-initialize / retrain cycles.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{DomainDataset, Example};
use crate::error::{Error, Result};
use crate::model::{init_params, loss_and_grads, predict, ModelConfig, ParamSet};
use crate::ops::Mode;
use crate::pruning::{prunable_total, prune_round, sparsity_of, MaskSet, PruneConfig};
use crate::rng::{self, Stream};
use crate::store::Ticket;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// stop after this many epochs without a validation improvement
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::PAPER
    }
}

impl TrainConfig {
    pub const PAPER: TrainConfig = TrainConfig {
        batch_size: 32,
        max_epochs: 15,
        learning_rate: 1e-3,
        l2_weight: 1e-5,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        seed: 0,
        patience: None,
    };

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::Config(format!("l2_weight {} must be non-negative", self.l2_weight)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} {b} outside (0, 1)")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1 when set".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: i32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

/// One Adam update with coupled ℓ2 (`g + λθ`). Masked-out positions and the
/// pad row are left at exactly zero.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    mask: Option<&MaskSet>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Data(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (g, s) in grads.iter().zip(params.specs()) {
        if g.shape() != s.shape.as_slice() {
            return Err(Error::ShapeMismatch { left: s.shape.clone(), right: g.shape().to_vec() });
        }
        g.ensure_finite(&format!("gradient of {}", s.name))?;
    }
    state.step += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(state.step));
    let c2 = T::one() - T::lit(cfg.beta2.powi(state.step));
    let (lr, l2, eps) = (T::lit(cfg.learning_rate), T::lit(cfg.l2_weight), T::lit(cfg.epsilon));
    let frozen: Vec<usize> = params.specs().iter().map(|s| s.frozen_prefix()).collect();
    for (i, theta) in params.tensors_mut().iter_mut().enumerate() {
        let keep = mask.map(|m| m.masks()[i].as_slice());
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in theta.data_mut().iter_mut().zip(grads[i].data()).enumerate().skip(frozen[i]) {
            if keep.is_some_and(|k| !k[j]) {
                *w = T::zero();
                m[j] = T::zero();
                v[j] = T::zero();
                continue;
            }
            let g = g + l2 * *w;
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if let Some(m) = mask {
        m.apply(params.tensors_mut())?;
    }
    params.ensure_finite()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sparsity: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// epoch whose snapshot was kept (0 = untrained)
    pub stop_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// best-validation snapshot
    pub params: ParamSet<f32>,
    pub record: RoundRecord,
    pub epochs: Vec<EpochLog>,
}

pub fn accuracy(model: &ModelConfig, params: &ParamSet<f32>, mask: Option<&MaskSet>, split: &[Example], batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let inputs: Vec<_> = split.iter().map(|e| &e.enc).collect();
    let preds = predict(model, params, mask, &inputs, batch_size.max(64))?;
    let correct = preds.iter().zip(split).filter(|(&p, e)| p == e.label as usize).count();
    Ok(correct as f64 / split.len() as f64)
}

/// Trains `init` under `mask` and keeps the snapshot with the best validation
/// accuracy (earliest on ties). The untrained parameters count as epoch 0.
pub fn train_round(
    model: &ModelConfig,
    init: &ParamSet<f32>,
    mask: &MaskSet,
    data: &DomainDataset,
    cfg: &TrainConfig,
    round: usize,
) -> Result<RoundOutcome> {
    train_round_observed(model, init, mask, data, cfg, round, &mut |_| {})
}

/// [`train_round`] calling `observer` with the parameters after every optimizer step.
pub fn train_round_observed(
    model: &ModelConfig,
    init: &ParamSet<f32>,
    mask: &MaskSet,
    data: &DomainDataset,
    cfg: &TrainConfig,
    round: usize,
    observer: &mut dyn FnMut(&ParamSet<f32>),
) -> Result<RoundOutcome> {
    cfg.validate()?;
    model.validate()?;
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::EmptyInput("dataset split"));
    }
    if data.vocab_size != model.vocab_size {
        return Err(Error::Config(format!("dataset vocabulary {} differs from model vocabulary {}", data.vocab_size, model.vocab_size)));
    }
    let mut params = init.masked(mask)?;
    let mut state = AdamState::new(&params);
    let eval = |p: &ParamSet<f32>| -> Result<(f64, f64)> {
        Ok((accuracy(model, p, Some(mask), &data.val, cfg.batch_size)?, accuracy(model, p, Some(mask), &data.test, cfg.batch_size)?))
    };

    let (val0, test0) = eval(&params)?;
    let mut epochs = vec![EpochLog { epoch: 0, train_loss: f64::NAN, val_acc: val0, test_acc: test0 }];
    let mut best = (params.clone(), 0usize, val0, test0);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle, &[round as u64, epoch as u64]);
        let mut dropout = rng::stream(cfg.seed, Stream::Dropout, &[round as u64, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &data.train[i].enc).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train[i].label as usize).collect();
            let (loss, mut grads) = loss_and_grads(model, &params, Some(mask), &batch, &labels, Mode::Train, &mut dropout)
                .map_err(|e| round_error(e, round, epoch))?;
            mask.apply(&mut grads)?;
            adam_step(&mut params, &grads, &mut state, cfg, Some(mask)).map_err(|e| round_error(e, round, epoch))?;
            observer(&params);
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let (val, test) = eval(&params)?;
        epochs.push(EpochLog { epoch, train_loss: loss_sum / data.train.len() as f64, val_acc: val, test_acc: test });
        log::debug!("round {round} epoch {epoch}: loss {:.4} val {val:.4} test {test:.4}", loss_sum / data.train.len() as f64);
        if val > best.2 {
            best = (params.clone(), epoch, val, test);
        } else if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }
    let (params, stop_epoch, val_acc, test_acc) = best;
    let sparsity = sparsity_of(mask, prunable_total(model));
    Ok(RoundOutcome { params, record: RoundRecord { round, sparsity, val_acc, test_acc, stop_epoch }, epochs })
}

fn round_error(e: Error, round: usize, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (round {round}, epoch {epoch})")),
        other => other,
    }
}

/// How surviving weights are re-initialized before each pruned round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// back to the original θ0
    Reset,
    /// fresh draw from the initialization distributions
    Random,
}

impl InitStrategy {
    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Reset => "reset",
            InitStrategy::Random => "random",
        }
    }
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reset" => Ok(InitStrategy::Reset),
            "random" => Ok(InitStrategy::Random),
            other => Err(Error::Config(format!("unknown init strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Reset gives `m ⊙ θ0`; Random draws from the stream `(seed, round)` and masks.
pub fn apply_init_strategy(
    model: &ModelConfig,
    theta0: Option<&ParamSet<f32>>,
    mask: &MaskSet,
    strategy: InitStrategy,
    seed: u64,
    round: usize,
) -> Result<ParamSet<f32>> {
    match strategy {
        InitStrategy::Reset => {
            let theta0 = theta0.ok_or_else(|| Error::Config("reset initialization requires the stored initial parameters".into()))?;
            theta0.masked(mask)
        }
        InitStrategy::Random => {
            let mut rng = rng::stream(seed, Stream::RandomInit, &[round as u64]);
            init_params::<f32, _>(model, &mut rng)?.masked(mask)
        }
    }
}

/// Initial parameters of a run.
pub fn initial_params(model: &ModelConfig, seed: u64) -> Result<ParamSet<f32>> {
    init_params(model, &mut rng::stream(seed, Stream::Init, &[]))
}

#[derive(Debug, Clone)]
pub struct LotteryRun {
    pub theta0: Arc<ParamSet<f32>>,
    /// rounds `1..=r_total`
    pub tickets: Vec<Ticket>,
    /// rounds `0..=r_total`; round 0 is the dense model
    pub records: Vec<RoundRecord>,
    pub epochs: Vec<Vec<EpochLog>>,
}

/// Dense seed round from θ0, then `prune.rounds` cycles of prune → init → train.
pub fn run_lottery(
    data: &DomainDataset,
    model: &ModelConfig,
    prune: &PruneConfig,
    train: &TrainConfig,
    strategy: InitStrategy,
) -> Result<LotteryRun> {
    run_lottery_observed(data, model, prune, train, strategy, &mut |_, _, _| {})
}

/// [`run_lottery`] with an observer receiving `(round, mask, params)` after every optimizer step.
pub fn run_lottery_observed(
    data: &DomainDataset,
    model: &ModelConfig,
    prune: &PruneConfig,
    train: &TrainConfig,
    strategy: InitStrategy,
    observer: &mut dyn FnMut(usize, &MaskSet, &ParamSet<f32>),
) -> Result<LotteryRun> {
    prune.validate()?;
    let theta0 = Arc::new(initial_params(model, train.seed)?);
    let mut mask = MaskSet::ones(model);
    let seed_round = train_round_observed(model, &theta0, &mask, data, train, 0, &mut |p| observer(0, &mask, p))?;
    log::info!("{} {strategy} seed {}: dense test accuracy {:.4}", data.name, train.seed, seed_round.record.test_acc);
    let mut trained = seed_round.params;
    let mut records = vec![seed_round.record];
    let mut epochs = vec![seed_round.epochs];
    let mut tickets = Vec::with_capacity(prune.rounds);
    for round in 1..=prune.rounds {
        mask = prune_round(&trained, &mask, prune)?;
        let init = apply_init_strategy(model, Some(&theta0), &mask, strategy, train.seed, round)?;
        let out = train_round_observed(model, &init, &mask, data, train, round, &mut |p| observer(round, &mask, p))?;
        log::info!(
            "{} {strategy} seed {} round {round}: sparsity {:.4} test accuracy {:.4}",
            data.name,
            train.seed,
            out.record.sparsity,
            out.record.test_acc
        );
        tickets.push(Ticket {
            round,
            mask: mask.clone(),
            theta0: Arc::clone(&theta0),
            model: model.clone(),
            prune: *prune,
            vocab_digest: data.vocab_digest.clone(),
            domain: data.name.clone(),
            seed: train.seed,
            strategy,
        });
        trained = out.params;
        records.push(out.record);
        epochs.push(out.epochs);
    }
    Ok(LotteryRun { theta0, tickets, records, epochs })
}

/// One row of the per-run records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryRow {
    pub round: usize,
    pub sparsity: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub stop_epoch: usize,
    pub strategy: String,
    pub domain: String,
    pub seed: u64,
}

impl LotteryRow {
    pub fn new(r: &RoundRecord, strategy: InitStrategy, domain: &str, seed: u64) -> Self {
        LotteryRow {
            round: r.round,
            sparsity: r.sparsity,
            val_acc: r.val_acc,
            test_acc: r.test_acc,
            stop_epoch: r.stop_epoch,
            strategy: strategy.name().to_string(),
            domain: domain.to_string(),
            seed,
        }
    }
}

pub fn write_rows<W: Write, R: Serialize>(out: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_rows<R: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<R>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rd.deserialize().enumerate() {
        // header is line 1
        out.push(row.map_err(|e: csv::Error| Error::Data(format!("{}:{}: {e}", path.display(), i + 2)))?);
    }
    Ok(out)
}
