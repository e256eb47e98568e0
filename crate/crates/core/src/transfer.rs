//! Re-training source-domain masks in a target domain.

use serde::{Deserialize, Serialize};

use crate::corpus::DomainDataset;
use crate::error::{Error, Result};
use crate::lottery::{apply_init_strategy, train_round, InitStrategy, RoundRecord, TrainConfig};
use crate::report::CurvePoint;
use crate::store::Ticket;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferStrategy {
    /// source mask, source θ0
    MasksReset,
    /// source mask, fresh initial values
    MasksRandom,
    /// the target domain's own reset tickets, for comparison
    TicketTarget,
}

impl TransferStrategy {
    pub fn name(self) -> &'static str {
        match self {
            TransferStrategy::MasksReset => "masks-reset",
            TransferStrategy::MasksRandom => "masks-random",
            TransferStrategy::TicketTarget => "ticket-target",
        }
    }
}

impl std::str::FromStr for TransferStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masks-reset" => Ok(TransferStrategy::MasksReset),
            "masks-random" => Ok(TransferStrategy::MasksRandom),
            "ticket-target" => Ok(TransferStrategy::TicketTarget),
            other => Err(Error::Config(format!("unknown transfer strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for TransferStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub source: String,
    pub target: String,
    pub strategy: String,
    pub round: usize,
    pub sparsity: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub seed: u64,
}

pub fn check_support(tickets: &[Ticket], target: &DomainDataset) -> Result<()> {
    for t in tickets {
        if t.vocab_digest != target.vocab_digest {
            return Err(Error::VocabMismatch { ticket: t.vocab_digest.clone(), target: target.vocab_digest.clone() });
        }
    }
    Ok(())
}

/// Trains every ticket's subnetwork once on `target`, keeping its mask fixed.
/// Randomness (shuffling, dropout, fresh draws) comes from `train.seed`.
pub fn run_transfer(tickets: &[Ticket], target: &DomainDataset, strategy: TransferStrategy, train: &TrainConfig) -> Result<Vec<TransferRecord>> {
    check_support(tickets, target)?;
    let init = match strategy {
        TransferStrategy::MasksReset => InitStrategy::Reset,
        TransferStrategy::MasksRandom => InitStrategy::Random,
        TransferStrategy::TicketTarget => {
            return Err(Error::Config("ticket-target results come from the target domain's own lottery run; see ticket_target_records".into()))
        }
    };
    tickets.iter().map(|t| transfer_one(t, target, init, train).map(|r| record(t, target, strategy, &r, train.seed))).collect()
}

/// Trains a single ticket on `target`.
pub fn transfer_one(ticket: &Ticket, target: &DomainDataset, init: InitStrategy, train: &TrainConfig) -> Result<RoundRecord> {
    check_support(std::slice::from_ref(ticket), target)?;
    let params = apply_init_strategy(&ticket.model, Some(&ticket.theta0), &ticket.mask, init, train.seed, ticket.round)?;
    Ok(train_round(&ticket.model, &params, &ticket.mask, target, train, ticket.round)?.record)
}

fn record(t: &Ticket, target: &DomainDataset, strategy: TransferStrategy, r: &RoundRecord, seed: u64) -> TransferRecord {
    TransferRecord {
        source: t.domain.clone(),
        target: target.name.clone(),
        strategy: strategy.name().to_string(),
        round: r.round,
        sparsity: r.sparsity,
        val_acc: r.val_acc,
        test_acc: r.test_acc,
        seed,
    }
}

/// Re-labels the target's own Ticket-Reset records as a transfer cell.
pub fn ticket_target_records(source: &str, target: &str, reset_records: &[RoundRecord], seed: u64) -> Vec<TransferRecord> {
    reset_records
        .iter()
        .filter(|r| r.round > 0)
        .map(|r| TransferRecord {
            source: source.to_string(),
            target: target.to_string(),
            strategy: TransferStrategy::TicketTarget.name().to_string(),
            round: r.round,
            sparsity: r.sparsity,
            val_acc: r.val_acc,
            test_acc: r.test_acc,
            seed,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseScanConfig {
    /// minimum accuracy gap, reset minus random
    pub margin: f64,
    /// required ratio of random to reset across-seed standard deviation
    pub factor: f64,
    /// consecutive rounds both conditions must hold
    pub window: usize,
}

impl Default for PhaseScanConfig {
    fn default() -> Self {
        PhaseScanConfig { margin: 0.02, factor: 2.0, window: 2 }
    }
}

/// Smallest sparsity from which, for `window` consecutive rounds, reset beats
/// random by more than `margin` and random's spread is at least `factor`
/// times reset's.
pub fn phase_transition_scan(reset: &[CurvePoint], random: &[CurvePoint], cfg: &PhaseScanConfig) -> Result<Option<f64>> {
    if cfg.window == 0 {
        return Err(Error::Config("phase scan window must be at least 1".into()));
    }
    if reset.len() != random.len() || reset.iter().zip(random).any(|(a, b)| a.round != b.round) {
        let rounds = |c: &[CurvePoint]| c.iter().map(|p| p.round).collect::<Vec<_>>();
        return Err(Error::Data(format!("round grids differ: {:?} vs {:?}", rounds(reset), rounds(random))));
    }
    if reset.len() < cfg.window {
        return Err(Error::Data(format!("{} rounds, fewer than the scan window {}", reset.len(), cfg.window)));
    }
    let hit: Vec<bool> = reset
        .iter()
        .zip(random)
        .map(|(a, b)| a.mean - b.mean > cfg.margin && b.std >= cfg.factor * a.std)
        .collect();
    Ok((0..=hit.len() - cfg.window).find(|&i| hit[i..i + cfg.window].iter().all(|&h| h)).map(|i| reset[i].sparsity))
}
