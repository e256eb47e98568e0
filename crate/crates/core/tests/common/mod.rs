#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ticketforge_core::corpus::{ingest_reviews, DomainDataset, SplitSizes};
use ticketforge_core::model::{init_params, loss_and_grads, ParamKind};
use ticketforge_core::ops::Mode;
use ticketforge_core::synthetic::{generate_domain, SyntheticConfig};
use ticketforge_core::vocab::{SeqEncoding, SubwordVocab};
use ticketforge_core::{ModelConfig, ParamSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small classifier with randomized dimensions.
pub fn random_tiny_model<R: Rng>(rng: &mut R) -> ModelConfig {
    let max_len = rng.random_range(3..=20);
    let mut heights: Vec<usize> = (1..=5.min(max_len)).filter(|_| rng.random_bool(0.5)).collect();
    if heights.is_empty() {
        heights.push(rng.random_range(1..=3.min(max_len)));
    }
    ModelConfig {
        vocab_size: rng.random_range(3..=50),
        embed_dim: rng.random_range(1..=8),
        filter_heights: heights,
        channels: rng.random_range(1..=4),
        mlp_hidden: rng.random_range(1..=6),
        num_classes: rng.random_range(2..=3),
        max_len,
        dropout: 0.5,
    }
}

/// Parameters with every entry (biases included) drawn away from zero, pad row kept at zero.
pub fn random_params_f64<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamSet<f64> {
    let mut p = init_params::<f64, _>(cfg, rng).unwrap();
    let specs = p.specs().to_vec();
    for (t, s) in p.tensors_mut().iter_mut().zip(&specs) {
        let frozen = s.frozen_prefix();
        let scale = match s.kind {
            ParamKind::Embedding => 1.0,
            _ => 0.8,
        };
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = if i < frozen { 0.0 } else { rng.random_range(-scale..scale) };
        }
    }
    p
}

pub fn random_batch<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> (Vec<SeqEncoding>, Vec<usize>) {
    let b = rng.random_range(1..=4);
    let seqs = (0..b)
        .map(|_| {
            let len = rng.random_range(1..=cfg.max_len);
            let mut ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
            ids.resize(cfg.max_len, 0);
            SeqEncoding { ids, original_len: len }
        })
        .collect();
    let labels = (0..b).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    (seqs, labels)
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// coordinates where the loss is not differentiable at the probe scale
    pub kinks: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

fn eval_loss(cfg: &ModelConfig, p: &ParamSet<f64>, batch: &[&SeqEncoding], labels: &[usize]) -> f64 {
    loss_and_grads(cfg, p, None, batch, labels, Mode::Eval, &mut rng(0)).unwrap().0
}

/// Compares every analytic gradient entry with a central difference.
pub fn gradient_check(cfg: &ModelConfig, params: &ParamSet<f64>, seqs: &[SeqEncoding], labels: &[usize], rtol: f64) -> GradCheck {
    let h = 1e-5;
    let atol = 1e-8;
    let batch: Vec<&SeqEncoding> = seqs.iter().collect();
    let (_, grads) = loss_and_grads(cfg, params, None, &batch, labels, Mode::Eval, &mut rng(0)).unwrap();
    let base = eval_loss(cfg, params, &batch, labels);
    let mut out = GradCheck::default();
    let mut probe = params.clone();
    for (ti, spec) in params.specs().iter().enumerate() {
        for i in 0..spec.len() {
            let orig = params.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + h;
            let up = eval_loss(cfg, &probe, &batch, labels);
            probe.tensors_mut()[ti].data_mut()[i] = orig - h;
            let down = eval_loss(cfg, &probe, &batch, labels);
            probe.tensors_mut()[ti].data_mut()[i] = orig;

            let fd = (up - down) / (2.0 * h);
            let (fwd, bwd) = ((up - base) / h, (base - down) / h);
            if (fwd - bwd).abs() > 1e-3 * (1.0 + fwd.abs().max(bwd.abs())) {
                out.kinks += 1;
                continue;
            }
            let g = grads[ti].data()[i];
            let err = (g - fd).abs();
            out.checked += 1;
            let rel = err / (g.abs().max(fd.abs()) + atol / rtol);
            out.worst = out.worst.max(rel);
            if err > rtol * g.abs().max(fd.abs()) + atol {
                out.failures.push(format!("{}[{i}]: analytic {g:e} vs numeric {fd:e}", spec.name));
            }
        }
    }
    out
}

/// Indices of the `k` largest magnitudes by full sort, lower index first on ties.
pub fn topk_oracle(values: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().partial_cmp(&values[a].abs()).unwrap().then(a.cmp(&b)));
    let mut mask = vec![false; values.len()];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

pub const DESK_VOCAB: usize = 200;
pub const DESK_MAX_LEN: usize = 32;

/// Two synthetic domains encoded with a shared vocabulary.
pub fn desk_domains(seed: u64) -> (SubwordVocab, Vec<DomainDataset>) {
    let syn = SyntheticConfig::default();
    let raws: Vec<_> = ["alpha", "beta"]
        .iter()
        .enumerate()
        .map(|(d, name)| ingest_reviews(name, generate_domain(&syn, seed, d as u64), seed, SplitSizes::DESK).unwrap())
        .collect();
    let texts: Vec<&str> = raws.iter().flat_map(|r| r.train_texts()).collect();
    let vocab = SubwordVocab::train(&texts, DESK_VOCAB, 1.0).unwrap();
    let data = raws.iter().map(|r| DomainDataset::encode(r, &vocab, DESK_MAX_LEN)).collect();
    (vocab, data)
}

pub fn desk_model(vocab: &SubwordVocab) -> ModelConfig {
    ModelConfig::desk(vocab.len(), DESK_MAX_LEN)
}

pub fn desk_train(seed: u64) -> ticketforge_core::TrainConfig {
    ticketforge_core::TrainConfig { learning_rate: 1e-2, seed, ..ticketforge_core::TrainConfig::PAPER }
}

pub fn desk_prune() -> ticketforge_core::PruneConfig {
    ticketforge_core::PruneConfig { rounds: 5, ..ticketforge_core::PruneConfig::PAPER }
}
