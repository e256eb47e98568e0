//! Layer-wise magnitude pruning.
//!
//! Each round keeps, per layer, the `k` largest-magnitude weights among the
//! ones that survived the previous round (the ℓ0 projection of the layer onto
//! `card ≤ k`). Pruned weights never come back, so masks are nested.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{prunable_counts, ModelConfig, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// How the per-layer keep count is derived from the prune fraction `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeepRule {
    /// keep `round((1-p)·len)`; realized sparsity follows `1-(1-p)^r`
    #[default]
    KeepFraction,
    /// keep `round(p·len)`, the formula read literally
    PaperLiteral,
}

impl std::str::FromStr for KeepRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep-fraction" => Ok(KeepRule::KeepFraction),
            "paper-literal" => Ok(KeepRule::PaperLiteral),
            other => Err(Error::Config(format!("unknown keep rule {other:?}"))),
        }
    }
}

impl std::fmt::Display for KeepRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KeepRule::KeepFraction => "keep-fraction",
            KeepRule::PaperLiteral => "paper-literal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// fraction of surviving weights removed per round
    pub fraction: f64,
    pub rounds: usize,
    #[serde(default)]
    pub keep_rule: KeepRule,
}

impl PruneConfig {
    pub const PAPER: PruneConfig = PruneConfig { fraction: 0.35, rounds: 20, keep_rule: KeepRule::KeepFraction };

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::Config(format!("prune fraction {} outside (0, 1)", self.fraction)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("prune rounds must be at least 1".into()));
        }
        Ok(())
    }

    /// Survivors kept out of `n` in one round; never drops a non-empty layer to zero.
    pub fn keep_count(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        let share = match self.keep_rule {
            KeepRule::KeepFraction => 1.0 - self.fraction,
            KeepRule::PaperLiteral => self.fraction,
        };
        ((share * n as f64).round() as usize).clamp(1, n)
    }
}

/// `1 - (1-p)^r`.
pub fn expected_sparsity(cfg: &PruneConfig, rounds: usize) -> f64 {
    1.0 - (1.0 - cfg.fraction).powi(rounds as i32)
}

/// Per-layer survivor counts after each of `rounds` rounds, starting from
/// `layer_counts`; entry 0 is the unpruned state.
pub fn survivor_schedule(layer_counts: &[usize], cfg: &PruneConfig, rounds: usize) -> Vec<Vec<usize>> {
    let mut out = vec![layer_counts.to_vec()];
    for _ in 0..rounds {
        let next = out.last().unwrap().iter().map(|&n| cfg.keep_count(n)).collect();
        out.push(next);
    }
    out
}

/// Boolean keep-mask of the `k` largest `|v|`; at equal magnitude the lower
/// index wins.
pub fn l0_project_topk<T: Scalar>(values: &[T], k: usize) -> Result<Vec<bool>> {
    if k > values.len() {
        return Err(Error::Config(format!("keep count {k} exceeds length {}", values.len())));
    }
    let mut mask = vec![false; values.len()];
    for i in top_k_indices(values.iter().map(|v| v.abs().as_f64()), k) {
        mask[i] = true;
    }
    Ok(mask)
}

fn top_k_indices(magnitudes: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = magnitudes.enumerate().map(|(i, m)| (m, i)).collect();
    if k == 0 {
        return Vec::new();
    }
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.into_iter().map(|(_, i)| i).collect()
}

/// One keep-mask per parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub round: usize,
    masks: Vec<Vec<bool>>,
    shapes: Vec<Vec<usize>>,
    layers: Vec<usize>,
    frozen: Vec<usize>,
}

impl MaskSet {
    fn filled(cfg: &ModelConfig, value: bool) -> Self {
        let specs = cfg.param_specs();
        MaskSet {
            round: 0,
            masks: specs.iter().map(|s| vec![value; s.len()]).collect(),
            shapes: specs.iter().map(|s| s.shape.clone()).collect(),
            layers: specs.iter().map(|s| s.layer).collect(),
            frozen: specs.iter().map(|s| s.frozen_prefix()).collect(),
        }
    }

    pub fn ones(cfg: &ModelConfig) -> Self {
        Self::filled(cfg, true)
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::filled(cfg, false)
    }

    pub fn from_bits(cfg: &ModelConfig, round: usize, masks: Vec<Vec<bool>>) -> Result<Self> {
        let mut out = Self::ones(cfg);
        if masks.len() != out.masks.len() {
            return Err(Error::Data(format!("expected {} masks, got {}", out.masks.len(), masks.len())));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != out.masks[i].len() {
                return Err(Error::ShapeMismatch { left: out.shapes[i].clone(), right: vec![m.len()] });
            }
        }
        out.masks = masks;
        out.round = round;
        Ok(out)
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    fn check(&self, tensors_len: usize, i: usize, t_len: usize) -> Result<()> {
        if tensors_len != self.masks.len() || t_len != self.masks[i].len() {
            return Err(Error::ShapeMismatch { left: self.shapes.get(i).cloned().unwrap_or_default(), right: vec![t_len] });
        }
        Ok(())
    }

    /// Zeroes every masked-out element in place.
    pub fn apply<T: Scalar>(&self, tensors: &mut [Tensor<T>]) -> Result<()> {
        let n = tensors.len();
        for (i, (t, m)) in tensors.iter_mut().zip(&self.masks).enumerate() {
            self.check(n, i, t.len())?;
            for (v, &keep) in t.data_mut().iter_mut().zip(m) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
        if n != self.masks.len() {
            return Err(Error::Data(format!("expected {} tensors, got {n}", self.masks.len())));
        }
        Ok(())
    }

    /// Surviving prunable positions (pad row excluded).
    pub fn ones_count(&self) -> usize {
        self.masks.iter().zip(&self.frozen).map(|(m, &f)| m[f..].iter().filter(|&&b| b).count()).sum()
    }

    pub fn layer_survivors(&self) -> Vec<usize> {
        let mut out = vec![0; self.layers.iter().max().map_or(0, |m| m + 1)];
        for ((m, &f), &l) in self.masks.iter().zip(&self.frozen).zip(&self.layers) {
            out[l] += m[f..].iter().filter(|&&b| b).count();
        }
        out
    }

    /// Elementwise `self ≤ other`.
    pub fn is_nested_in(&self, other: &MaskSet) -> bool {
        self.masks.len() == other.masks.len()
            && self.masks.iter().zip(&other.masks).all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| !x || y))
    }
}

/// Fraction of prunable positions that are masked out.
pub fn sparsity_of(mask: &MaskSet, prunable_total: usize) -> f64 {
    if prunable_total == 0 {
        return 0.0;
    }
    1.0 - mask.ones_count() as f64 / prunable_total as f64
}

pub fn prunable_total(cfg: &ModelConfig) -> usize {
    prunable_counts(cfg).iter().sum()
}

/// Next nested mask: per layer, the largest-magnitude survivors of `prev` in
/// `params`, selected independently of other layers.
pub fn prune_round<T: Scalar>(params: &ParamSet<T>, prev: &MaskSet, cfg: &PruneConfig) -> Result<MaskSet> {
    cfg.validate()?;
    if params.len() != prev.masks.len() {
        return Err(Error::Data(format!("mask has {} tensors, parameters {}", prev.masks.len(), params.len())));
    }
    let mut next = prev.clone();
    next.round = prev.round + 1;
    let num_layers = prev.layers.iter().max().map_or(0, |m| m + 1);
    for layer in 0..num_layers {
        // (tensor, flat index) of every survivor, in layer order
        let mut positions = Vec::new();
        let mut magnitudes = Vec::new();
        for (ti, (t, m)) in params.tensors().iter().zip(&prev.masks).enumerate() {
            if prev.layers[ti] != layer {
                continue;
            }
            prev.check(params.len(), ti, t.len())?;
            for (j, (&v, &keep)) in t.data().iter().zip(m).enumerate().skip(prev.frozen[ti]) {
                if keep {
                    positions.push((ti, j));
                    magnitudes.push(v.abs().as_f64());
                }
            }
        }
        if positions.is_empty() {
            log::warn!("layer {layer} has no surviving weights; skipping");
            continue;
        }
        let k = cfg.keep_count(positions.len());
        for &(ti, j) in &positions {
            next.masks[ti][j] = false;
        }
        for i in top_k_indices(magnitudes.into_iter(), k) {
            let (ti, j) = positions[i];
            next.masks[ti][j] = true;
        }
    }
    Ok(next)
}

/// Zeroes gradient entries at masked-out positions.
pub fn mask_gradients<T: Scalar>(grads: &mut [Tensor<T>], mask: &MaskSet) -> Result<()> {
    mask.apply(grads)
}
