//! Subcommand implementations. Every command writes the effective
//! configuration to `<out>/config.toml` before doing any work.
//!
//! Output layout:
//!
//! ```text
//! <out>/config.toml  vocab  divergence.csv  manifest.json
//! <out>/records.csv                         obtain records, all cells
//! <out>/runs/<domain>-<strategy>-seed<s>/   vocab theta0.bin tickets/ records.csv epochs.csv
//! <out>/transfer/<src>-<tgt>-<strategy>-seed<s>.csv
//! <out>/transfer.csv  phase.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ticketforge_core::corpus::{divergence_matrix, ingest_reviews, read_jsonl, DivergenceMatrix, DomainDataset, RawDomain};
use ticketforge_core::lottery::{read_rows, run_lottery, write_rows, LotteryRow, RoundRecord};
use ticketforge_core::report::{read_observations, summarize, write_curves, Curves, Observation};
use ticketforge_core::store::RunDir;
use ticketforge_core::synthetic::generate_domain;
use ticketforge_core::transfer::{phase_transition_scan, run_transfer, ticket_target_records, PhaseScanConfig, TransferRecord};
use ticketforge_core::vocab::SubwordVocab;
use ticketforge_core::{InitStrategy, TransferStrategy};

use crate::config::ExperimentConfig;
use crate::{CliError, Result};

pub const THREADS_ENV: &str = "TICKETFORGE_THREADS";

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    pool: rayon::ThreadPool,
}

impl Context {
    /// Validates the configuration and sizes the worker pool from
    /// `TICKETFORGE_THREADS` (all cores when unset).
    pub fn new(cfg: ExperimentConfig, out: PathBuf, force: bool) -> Result<Self> {
        cfg.validate()?;
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?,
            Err(_) => 0,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let ctx = Context { cfg, out, force, pool };
        write_file(&ctx.out.join("config.toml"), ctx.cfg.to_toml().as_bytes())?;
        Ok(ctx)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.out.join("vocab")
    }

    pub fn run_dir(&self, domain: &str, strategy: InitStrategy, seed: u64) -> RunDir {
        RunDir::new(self.out.join("runs").join(format!("{domain}-{strategy}-seed{seed}")))
    }

    fn transfer_cell_path(&self, source: &str, target: &str, strategy: TransferStrategy, seed: u64) -> PathBuf {
        self.out.join("transfer").join(format!("{source}-{target}-{strategy}-seed{seed}.csv"))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_rows(&mut buf, rows)?;
    Ok(buf)
}

/// Loads (or generates) every domain and draws its balanced splits.
pub fn load_domains(cfg: &ExperimentConfig) -> Result<Vec<RawDomain>> {
    if let Some(s) = &cfg.synthetic {
        return s
            .names
            .iter()
            .enumerate()
            .map(|(i, name)| Ok(ingest_reviews(name, generate_domain(&s.generator, s.seed, i as u64), cfg.split_seed, cfg.splits)?))
            .collect();
    }
    cfg.domains
        .iter()
        .map(|d| {
            let records = read_jsonl(&d.path)?;
            Ok(ingest_reviews(&d.name, records, cfg.split_seed, cfg.splits)?)
        })
        .collect()
}

/// Trains the joint vocabulary on all domains' training texts.
pub fn cmd_build_vocab(ctx: &Context) -> Result<SubwordVocab> {
    let raws = load_domains(&ctx.cfg)?;
    build_vocab(ctx, &raws)
}

fn build_vocab(ctx: &Context, raws: &[RawDomain]) -> Result<SubwordVocab> {
    let texts: Vec<&str> = raws.iter().flat_map(|r| r.train_texts()).collect();
    let vocab = SubwordVocab::train(&texts, ctx.cfg.vocab.size, ctx.cfg.vocab.coverage)?;
    vocab.save(&ctx.vocab_path())?;
    println!(
        "vocabulary: {} pieces, character coverage {:.6}, digest {}",
        vocab.len(),
        vocab.char_coverage(&texts)?,
        &vocab.digest()[..12]
    );
    Ok(vocab)
}

/// The stored vocabulary, built first when missing (or when forced).
fn ensure_vocab(ctx: &Context, raws: &[RawDomain]) -> Result<SubwordVocab> {
    let path = ctx.vocab_path();
    if path.exists() && !ctx.force {
        return Ok(SubwordVocab::load(&path)?);
    }
    build_vocab(ctx, raws)
}

fn encode_all(ctx: &Context, raws: &[RawDomain], vocab: &SubwordVocab) -> Vec<DomainDataset> {
    raws.iter().map(|r| DomainDataset::encode(r, vocab, ctx.cfg.model.max_len)).collect()
}

/// Pairwise Jensen-Shannon divergence of the domains' subword unigrams.
pub fn cmd_divergence(ctx: &Context) -> Result<DivergenceMatrix> {
    let raws = load_domains(&ctx.cfg)?;
    let vocab = ensure_vocab(ctx, &raws)?;
    let data = encode_all(ctx, &raws, &vocab);
    let m = divergence_matrix(&data)?;
    let mut buf = Vec::new();
    m.write_csv(&mut buf, ctx.cfg.divergence.scale)?;
    write_file(&ctx.out.join("divergence.csv"), &buf)?;
    for (i, j, v) in m.ranked_pairs() {
        println!("{:>12} {:>12} {:.6e}", m.names[i], m.names[j], v);
    }
    Ok(m)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// cell id -> status
    pub cells: BTreeMap<String, CellStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load(out: &Path) -> Result<Self> {
        let p = Self::path(out);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
    }

    fn save(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Core(e.into()))?;
        write_file(&Self::path(out), text.as_bytes())
    }

    pub fn is_complete(&self, id: &str) -> bool {
        self.cells.get(id).is_some_and(|c| c.complete)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObtainSummary {
    pub ran: usize,
    pub skipped: usize,
    pub rows: Vec<LotteryRow>,
}

/// Runs the lottery for every domain x strategy x seed and writes tickets
/// and records. Completed cells are reused unless forced.
pub fn cmd_obtain(ctx: &Context) -> Result<ObtainSummary> {
    let raws = load_domains(&ctx.cfg)?;
    let vocab = ensure_vocab(ctx, &raws)?;
    let data = encode_all(ctx, &raws, &vocab);
    let model = ctx.cfg.model_config(vocab.len());
    let prune = ctx.cfg.prune_config();
    let vocab_text = vocab.to_text();
    let config_text = ctx.cfg.to_toml();

    let mut cells = Vec::new();
    for d in &data {
        for &strategy in &ctx.cfg.strategies {
            for &seed in &ctx.cfg.seeds {
                cells.push((d, strategy, seed));
            }
        }
    }
    let mut manifest = Manifest::load(&ctx.out)?;
    let cell_id = |d: &DomainDataset, s: InitStrategy, seed: u64| format!("obtain/{}-{s}-seed{seed}", d.name);
    let todo: Vec<bool> = cells
        .iter()
        .map(|&(d, s, seed)| ctx.force || !manifest.is_complete(&cell_id(d, s, seed)) || !ctx.run_dir(&d.name, s, seed).records_path().exists())
        .collect();

    let results: Vec<Result<()>> = ctx.pool.install(|| {
        cells
            .par_iter()
            .zip(&todo)
            .map(|(&(d, strategy, seed), &run)| {
                if !run {
                    return Ok(());
                }
                let dir = ctx.run_dir(&d.name, strategy, seed);
                let out = run_lottery(d, &model, &prune, &ctx.cfg.train_config(seed), strategy)?;
                write_file(&dir.vocab_path(), vocab_text.as_bytes())?;
                write_file(&dir.root().join("config.toml"), config_text.as_bytes())?;
                dir.write_tickets(&out.tickets)?;
                let rows: Vec<LotteryRow> = out.records.iter().map(|r| LotteryRow::new(r, strategy, &d.name, seed)).collect();
                let epochs: Vec<EpochRow> = out
                    .epochs
                    .iter()
                    .enumerate()
                    .flat_map(|(round, logs)| logs.iter().map(move |e| EpochRow { round, epoch: e.epoch, train_loss: e.train_loss, val_acc: e.val_acc, test_acc: e.test_acc }))
                    .collect();
                write_file(&dir.root().join("epochs.csv"), &csv_bytes(&epochs)?)?;
                // records last: their presence marks the cell as done on disk
                write_file(&dir.records_path(), &csv_bytes(&rows)?)?;
                Ok(())
            })
            .collect()
    });

    let mut first_err = None;
    for ((&(d, s, seed), res), &ran) in cells.iter().zip(results).zip(&todo) {
        let id = cell_id(d, s, seed);
        match res {
            Ok(()) if ran => {
                manifest.cells.insert(id, CellStatus { complete: true, error: None });
            }
            Ok(()) => {}
            Err(e) => {
                log::error!("{id}: {e}");
                manifest.cells.insert(id, CellStatus { complete: false, error: Some(e.to_string()) });
                first_err.get_or_insert(e);
            }
        }
    }
    manifest.save(&ctx.out)?;
    if let Some(e) = first_err {
        return Err(e);
    }

    let mut rows = Vec::new();
    for &(d, s, seed) in &cells {
        rows.extend(read_rows::<LotteryRow>(&ctx.run_dir(&d.name, s, seed).records_path())?);
    }
    write_file(&ctx.out.join("records.csv"), &csv_bytes(&rows)?)?;
    let ran = todo.iter().filter(|&&r| r).count();
    println!("obtain: {ran} cells run, {} reused, {} records", cells.len() - ran, rows.len());
    Ok(ObtainSummary { ran, skipped: cells.len() - ran, rows })
}

#[derive(Debug, Serialize, Deserialize)]
struct EpochRow {
    round: usize,
    epoch: usize,
    train_loss: f64,
    val_acc: f64,
    test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSummary {
    pub ran: usize,
    pub skipped: usize,
    pub records: Vec<TransferRecord>,
    /// (cell, threshold sparsity)
    pub phase: Vec<(String, Option<f64>)>,
}

/// Trains each source run's tickets on each target domain.
pub fn cmd_transfer(ctx: &Context) -> Result<TransferSummary> {
    let raws = load_domains(&ctx.cfg)?;
    let vocab_path = ctx.vocab_path();
    if !vocab_path.exists() {
        return Err(CliError::Missing(format!("no vocabulary at {}; run obtain first", vocab_path.display())));
    }
    let vocab = SubwordVocab::load(&vocab_path)?;
    let data = encode_all(ctx, &raws, &vocab);
    let by_name: BTreeMap<&str, &DomainDataset> = data.iter().map(|d| (d.name.as_str(), d)).collect();

    let mut cells = Vec::new();
    for (s, t) in ctx.cfg.transfer_pairs() {
        for &strategy in &ctx.cfg.transfer.strategies {
            for &seed in &ctx.cfg.seeds {
                cells.push((s.clone(), t.clone(), strategy, seed));
            }
        }
    }
    // fail on missing inputs before any training starts
    for (s, t, strategy, seed) in &cells {
        let needed = match strategy {
            TransferStrategy::TicketTarget => ctx.run_dir(t, InitStrategy::Reset, *seed),
            _ => ctx.run_dir(s, InitStrategy::Reset, *seed),
        };
        if !needed.records_path().exists() {
            return Err(CliError::Missing(format!("{strategy} for {s}->{t} needs the obtain run {}, which is missing", needed.root().display())));
        }
    }

    let todo: Vec<bool> = cells.iter().map(|(s, t, st, seed)| ctx.force || !ctx.transfer_cell_path(s, t, *st, *seed).exists()).collect();
    let results: Vec<Result<()>> = ctx.pool.install(|| {
        cells
            .par_iter()
            .zip(&todo)
            .map(|((s, t, strategy, seed), &run)| {
                if !run {
                    return Ok(());
                }
                let records = match strategy {
                    TransferStrategy::TicketTarget => {
                        let rows: Vec<LotteryRow> = read_rows(&ctx.run_dir(t, InitStrategy::Reset, *seed).records_path())?;
                        let rr: Vec<RoundRecord> = rows
                            .iter()
                            .map(|r| RoundRecord { round: r.round, sparsity: r.sparsity, val_acc: r.val_acc, test_acc: r.test_acc, stop_epoch: r.stop_epoch })
                            .collect();
                        ticket_target_records(s, t, &rr, *seed)
                    }
                    _ => {
                        let tickets = ctx.run_dir(s, InitStrategy::Reset, *seed).load_tickets()?;
                        run_transfer(&tickets, by_name[t.as_str()], *strategy, &ctx.cfg.train_config(*seed))?
                    }
                };
                write_file(&ctx.transfer_cell_path(s, t, *strategy, *seed), &csv_bytes(&records)?)
            })
            .collect()
    });
    let mut manifest = Manifest::load(&ctx.out)?;
    let mut first_err = None;
    for ((cell, res), &ran) in cells.iter().zip(results).zip(&todo) {
        let id = format!("transfer/{}-{}-{}-seed{}", cell.0, cell.1, cell.2, cell.3);
        match res {
            Ok(()) if ran => {
                manifest.cells.insert(id, CellStatus { complete: true, error: None });
            }
            Ok(()) => {}
            Err(e) => {
                log::error!("{id}: {e}");
                manifest.cells.insert(id, CellStatus { complete: false, error: Some(e.to_string()) });
                first_err.get_or_insert(e);
            }
        }
    }
    manifest.save(&ctx.out)?;
    if let Some(e) = first_err {
        return Err(e);
    }

    let mut records = Vec::new();
    for (s, t, st, seed) in &cells {
        records.extend(read_rows::<TransferRecord>(&ctx.transfer_cell_path(s, t, *st, *seed))?);
    }
    let path = ctx.out.join("transfer.csv");
    write_file(&path, &csv_bytes(&records)?)?;
    let curves = summarize(&read_observations(&path)?);
    let phase = phase_rows(&curves, "masks-reset", "masks-random", &ctx.cfg.phase)?;
    write_file(&ctx.out.join("phase.csv"), &csv_bytes(&phase)?)?;
    print_phase(&phase);
    let ran = todo.iter().filter(|&&r| r).count();
    println!("transfer: {ran} cells run, {} reused, {} records", cells.len() - ran, records.len());
    Ok(TransferSummary {
        ran,
        skipped: cells.len() - ran,
        records,
        phase: phase.into_iter().map(|p| (p.group, p.threshold)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub group: String,
    pub reset: String,
    pub random: String,
    pub threshold: Option<f64>,
}

fn phase_rows(curves: &Curves, reset: &str, random: &str, cfg: &PhaseScanConfig) -> Result<Vec<PhaseRow>> {
    let mut out = Vec::new();
    for ((group, strategy), a) in curves {
        if strategy != reset {
            continue;
        }
        let Some(b) = curves.get(&(group.clone(), random.to_string())) else {
            continue;
        };
        let pruned = |c: &[ticketforge_core::report::CurvePoint]| c.iter().filter(|p| p.round > 0).cloned().collect::<Vec<_>>();
        let (a, b) = (pruned(a), pruned(b));
        if a.len() < cfg.window {
            continue;
        }
        let threshold = phase_transition_scan(&a, &b, cfg)?;
        out.push(PhaseRow { group: group.clone(), reset: reset.into(), random: random.into(), threshold });
    }
    Ok(out)
}

fn print_phase(rows: &[PhaseRow]) {
    for r in rows {
        match r.threshold {
            Some(s) => println!("{}: {} separates from {} at sparsity {:.4}", r.group, r.reset, r.random, s),
            None => println!("{}: no phase transition between {} and {}", r.group, r.reset, r.random),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub curves: Curves,
    pub phase: Vec<PhaseRow>,
}

/// Per (group, strategy, round) mean and standard deviation of test accuracy
/// across seeds, from the records of one or more output directories.
pub fn cmd_report(dirs: &[PathBuf], out: &Path, phase: &PhaseScanConfig) -> Result<ReportSummary> {
    if dirs.is_empty() {
        return Err(CliError::Config("report needs at least one output directory".into()));
    }
    let mut obs: Vec<Observation> = Vec::new();
    for dir in dirs {
        let mut found = false;
        let records = dir.join("records.csv");
        if records.exists() {
            found = true;
            for mut o in read_observations(&records)? {
                // round 0 is the dense model, identical for every strategy
                if o.round == 0 {
                    if o.strategy != InitStrategy::Reset.name() {
                        continue;
                    }
                    o.strategy = "full-model".into();
                }
                obs.push(o);
            }
        }
        let transfer = dir.join("transfer.csv");
        if transfer.exists() {
            found = true;
            obs.extend(read_observations(&transfer)?);
        }
        if !found {
            return Err(CliError::Missing(format!("{} has neither records.csv nor transfer.csv", dir.display())));
        }
    }
    let curves = summarize(&obs);
    let mut buf = Vec::new();
    write_curves(&mut buf, &curves)?;
    write_file(&out.join("summary.csv"), &buf)?;
    let mut rows = phase_rows(&curves, "reset", "random", phase)?;
    rows.extend(phase_rows(&curves, "masks-reset", "masks-random", phase)?);
    write_file(&out.join("phase.csv"), &csv_bytes(&rows)?)?;
    for ((g, s), points) in &curves {
        let line: Vec<String> = points.iter().map(|p| format!("{:.3}±{:.3}", p.mean, p.std)).collect();
        println!("{g:>16} {s:>14} {}", line.join(" "));
    }
    print_phase(&rows);
    Ok(ReportSummary { curves, phase: rows })
}
