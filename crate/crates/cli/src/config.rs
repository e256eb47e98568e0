//! Experiment configuration, read from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ticketforge_core::corpus::SplitSizes;
use ticketforge_core::synthetic::SyntheticConfig;
use ticketforge_core::transfer::PhaseScanConfig;
use ticketforge_core::{InitStrategy, KeepRule, ModelConfig, PruneConfig, TrainConfig, TransferStrategy};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// lottery initialization strategies to run in the obtain phase
    pub strategies: Vec<InitStrategy>,
    /// seed of the train/validation/test split draw
    pub split_seed: u64,
    pub splits: SplitSizes,
    pub vocab: VocabSection,
    pub model: ModelSection,
    pub prune: PruneSection,
    pub train: TrainSection,
    pub transfer: TransferSection,
    pub phase: PhaseScanConfig,
    pub divergence: DivergenceSection,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub domains: Vec<DomainSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub size: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub filter_heights: Vec<usize>,
    pub channels: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub max_len: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub fraction: f64,
    pub rounds: usize,
    pub keep_rule: KeepRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    /// `[source, target]` cells; every ordered pair of distinct domains when empty
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<(String, String)>,
    pub strategies: Vec<TransferStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceSection {
    /// multiplier applied to the values written to the matrix file
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSource {
    pub name: String,
    /// newline-delimited JSON with `text` and `rating` fields
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub names: Vec<String>,
    pub seed: u64,
    pub generator: SyntheticConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3, 4, 5],
            strategies: vec![InitStrategy::Reset, InitStrategy::Random],
            split_seed: 1,
            splits: SplitSizes::DESK,
            vocab: VocabSection::default(),
            model: ModelSection::default(),
            prune: PruneSection::default(),
            train: TrainSection::default(),
            transfer: TransferSection::default(),
            phase: PhaseScanConfig::default(),
            divergence: DivergenceSection::default(),
            domains: Vec::new(),
            synthetic: None,
        }
    }
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection { size: 200, coverage: 1.0 }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk(0, 32);
        ModelSection {
            embed_dim: m.embed_dim,
            filter_heights: m.filter_heights,
            channels: m.channels,
            mlp_hidden: m.mlp_hidden,
            num_classes: m.num_classes,
            max_len: m.max_len,
            dropout: m.dropout,
        }
    }
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection { fraction: 0.35, rounds: 5, keep_rule: KeepRule::KeepFraction }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { learning_rate: 1e-2, ..TrainSection::from(TrainConfig::PAPER) }
    }
}

impl From<TrainConfig> for TrainSection {
    fn from(t: TrainConfig) -> Self {
        TrainSection {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            learning_rate: t.learning_rate,
            l2_weight: t.l2_weight,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            patience: t.patience,
        }
    }
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            pairs: Vec::new(),
            strategies: vec![TransferStrategy::MasksReset, TransferStrategy::MasksRandom, TransferStrategy::TicketTarget],
        }
    }
}

impl Default for DivergenceSection {
    fn default() -> Self {
        DivergenceSection { scale: 1.0 }
    }
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection { names: vec!["alpha".into(), "beta".into()], seed: 1, generator: SyntheticConfig::default() }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Published hyperparameters: 8K subwords at 0.9995 coverage, the full
    /// model, p = 0.35 over 20 rounds, Adam at 1e-3, 20K/10K/10K splits.
    pub fn apply_paper_preset(&mut self) {
        let m = ModelConfig::paper(8000);
        self.vocab = VocabSection { size: 8000, coverage: 0.9995 };
        self.model = ModelSection {
            embed_dim: m.embed_dim,
            filter_heights: m.filter_heights,
            channels: m.channels,
            mlp_hidden: m.mlp_hidden,
            num_classes: m.num_classes,
            max_len: m.max_len,
            dropout: m.dropout,
        };
        let p = PruneConfig::PAPER;
        self.prune = PruneSection { fraction: p.fraction, rounds: p.rounds, keep_rule: p.keep_rule };
        self.train = TrainConfig::PAPER.into();
        self.splits = SplitSizes::PAPER;
    }

    pub fn use_synthetic(&mut self) {
        if self.synthetic.is_none() {
            self.synthetic = Some(SyntheticSection::default());
        }
        self.domains.clear();
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            embed_dim: m.embed_dim,
            filter_heights: m.filter_heights.clone(),
            channels: m.channels,
            mlp_hidden: m.mlp_hidden,
            num_classes: m.num_classes,
            max_len: m.max_len,
            dropout: m.dropout,
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig { fraction: self.prune.fraction, rounds: self.prune.rounds, keep_rule: self.prune.keep_rule }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            learning_rate: t.learning_rate,
            l2_weight: t.l2_weight,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed,
            patience: t.patience,
        }
    }

    pub fn domain_names(&self) -> Vec<String> {
        match &self.synthetic {
            Some(s) => s.names.clone(),
            None => self.domains.iter().map(|d| d.name.clone()).collect(),
        }
    }

    /// Transfer cells in configuration order.
    pub fn transfer_pairs(&self) -> Vec<(String, String)> {
        if !self.transfer.pairs.is_empty() {
            return self.transfer.pairs.clone();
        }
        let names = self.domain_names();
        let mut out = Vec::new();
        for s in &names {
            for t in &names {
                if s != t {
                    out.push((s.clone(), t.clone()));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return err("seed list is empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return err("seed list has duplicates".into());
        }
        if self.strategies.is_empty() {
            return err("no lottery strategies configured".into());
        }
        if self.synthetic.is_some() && !self.domains.is_empty() {
            return err("configure either [[domains]] or [synthetic], not both".into());
        }
        let names = self.domain_names();
        if names.is_empty() {
            return err("no domains configured (add [[domains]] entries or use --synthetic)".into());
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.is_empty() || n.contains(['/', '\\', ',']) || n.chars().any(char::is_whitespace) {
                return err(format!("domain name {n:?} must be non-empty without separators or whitespace"));
            }
            if !seen.insert(n) {
                return err(format!("duplicate domain name {n:?}"));
            }
        }
        for d in &self.domains {
            if !d.path.is_file() {
                return err(format!("domain {}: input {} does not exist", d.name, d.path.display()));
            }
        }
        if let Some(s) = &self.synthetic {
            let g = &s.generator;
            if g.topic_words == 0 || g.sentiment_words == 0 || g.min_words == 0 || g.max_words < g.min_words {
                return err("synthetic generator needs positive pool sizes and min_words <= max_words".into());
            }
            if !(0.0..=0.5).contains(&g.noise) || !(0.0..1.0).contains(&g.neutral_rate) {
                return err("synthetic noise must lie in [0, 0.5] and neutral_rate in [0, 1)".into());
            }
            let per_class = (self.splits.train + self.splits.val + self.splits.test) / 2;
            if g.records / 2 < per_class {
                return err(format!("synthetic domains have {} labeled records, splits need {}", g.records, 2 * per_class));
            }
        }
        if !(self.vocab.coverage > 0.0 && self.vocab.coverage <= 1.0) {
            return err(format!("vocab coverage {} outside (0, 1]", self.vocab.coverage));
        }
        self.model_config(self.vocab.size.max(1)).validate()?;
        self.prune_config().validate()?;
        self.train_config(0).validate()?;
        for (s, t) in &self.transfer.pairs {
            for n in [s, t] {
                if !seen.contains(n) {
                    return err(format!("transfer pair references unknown domain {n:?}"));
                }
            }
        }
        if !(self.divergence.scale > 0.0 && self.divergence.scale.is_finite()) {
            return err("divergence scale must be positive".into());
        }
        Ok(())
    }
}
