//! Rating-labeled review ingestion and distributional-shift measurement.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::vocab::{SeqEncoding, SubwordVocab, PAD_ID};

/// One line of the newline-delimited JSON input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub text: String,
    pub rating: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const PAPER: SplitSizes = SplitSizes { train: 20_000, val: 10_000, test: 10_000 };
    pub const DESK: SplitSizes = SplitSizes { train: 1000, val: 200, test: 200 };
}

/// Ratings 1-2 are negative (0), 4-5 positive (1), 3 is neutral and dropped.
pub fn rating_label(rating: u8) -> Result<Option<u8>> {
    match rating {
        1 | 2 => Ok(Some(0)),
        3 => Ok(None),
        4 | 5 => Ok(Some(1)),
        r => Err(Error::Data(format!("rating {r} outside 1..=5"))),
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ReviewRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReviewRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[ReviewRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Balanced text splits of one domain, before subword encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDomain {
    pub name: String,
    pub train: Vec<(String, u8)>,
    pub val: Vec<(String, u8)>,
    pub test: Vec<(String, u8)>,
}

impl RawDomain {
    pub fn train_texts(&self) -> impl Iterator<Item = &str> {
        self.train.iter().map(|(t, _)| t.as_str())
    }
}

/// Drops neutral ratings and draws disjoint, exactly balanced splits.
pub fn ingest_reviews(name: &str, records: impl IntoIterator<Item = ReviewRecord>, seed: u64, sizes: SplitSizes) -> Result<RawDomain> {
    for (what, n) in [("train", sizes.train), ("validation", sizes.val), ("test", sizes.test)] {
        if n == 0 || n % 2 != 0 {
            return Err(Error::Config(format!("{what} size {n} must be positive and even for a balanced split")));
        }
    }
    let mut by_class: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for r in records {
        if let Some(label) = rating_label(r.rating)? {
            by_class[label as usize].push(r.text);
        }
    }
    let per_class = (sizes.train + sizes.val + sizes.test) / 2;
    for (label, texts) in by_class.iter().enumerate() {
        if texts.len() < per_class {
            return Err(Error::InsufficientRecords(format!(
                "domain {name}: class {label} has {} records, needs {per_class} (short by {})",
                texts.len(),
                per_class - texts.len()
            )));
        }
    }
    let mut rng = rng::stream(seed, Stream::Ingest, &[]);
    let mut splits: [Vec<(String, u8)>; 3] = Default::default();
    for (label, texts) in by_class.iter_mut().enumerate() {
        texts.shuffle(&mut rng);
        let mut it = texts.drain(..);
        for (split, n) in splits.iter_mut().zip([sizes.train, sizes.val, sizes.test]) {
            split.extend(it.by_ref().take(n / 2).map(|t| (t, label as u8)));
        }
    }
    for split in &mut splits {
        split.shuffle(&mut rng);
    }
    let [train, val, test] = splits;
    Ok(RawDomain { name: name.to_string(), train, val, test })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub enc: SeqEncoding,
    pub label: u8,
}

/// A domain's splits encoded against the shared vocabulary.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub name: String,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab_size: usize,
    pub vocab_digest: String,
}

impl DomainDataset {
    pub fn encode(raw: &RawDomain, vocab: &SubwordVocab, max_len: usize) -> Self {
        let enc = |split: &[(String, u8)]| -> Vec<Example> {
            split.iter().map(|(t, l)| Example { enc: vocab.encode(t, max_len), label: *l }).collect()
        };
        DomainDataset {
            name: raw.name.clone(),
            train: enc(&raw.train),
            val: enc(&raw.val),
            test: enc(&raw.test),
            vocab_size: vocab.len(),
            vocab_digest: vocab.digest(),
        }
    }

    pub fn max_len(&self) -> usize {
        self.train.first().map_or(0, |e| e.enc.ids.len())
    }
}

/// Probability mass over vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramDist {
    probs: Vec<f64>,
}

impl UnigramDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("unigram distribution"));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Data("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("probabilities sum to {total}, not 1")));
        }
        Ok(UnigramDist { probs })
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyInput("unigram counts"));
        }
        Ok(UnigramDist { probs: counts.iter().map(|&c| c as f64 / total as f64).collect() })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Relative frequency of every id in the training split, pad excluded.
pub fn unigram_distribution(d: &DomainDataset) -> Result<UnigramDist> {
    let mut counts = vec![0u64; d.vocab_size.max(1)];
    for ex in &d.train {
        for &id in &ex.enc.ids {
            if id != PAD_ID {
                let slot = counts
                    .get_mut(id as usize)
                    .ok_or(Error::TokenOutOfRange { id: id as usize, vocab: d.vocab_size })?;
                *slot += 1;
            }
        }
    }
    UnigramDist::from_counts(&counts).map_err(|_| Error::EmptyInput("training split of unigram_distribution"))
}

/// `Σ p ln(p/q)` in nats over the support of `p`.
pub fn kl_divergence(p: &UnigramDist, q: &UnigramDist) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::SupportMismatch(p.probs.len(), q.probs.len()));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::AbsoluteContinuity(i));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// Jensen-Shannon divergence in nats against the midpoint mixture.
pub fn jsd(p: &UnigramDist, q: &UnigramDist) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::SupportMismatch(p.probs.len(), q.probs.len()));
    }
    let m = UnigramDist { probs: p.probs.iter().zip(&q.probs).map(|(a, b)| 0.5 * (a + b)).collect() };
    Ok(0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceMatrix {
    pub names: Vec<String>,
    /// row-major, nats
    pub values: Vec<Vec<f64>>,
}

pub fn divergence_matrix(domains: &[DomainDataset]) -> Result<DivergenceMatrix> {
    if domains.len() < 2 {
        return Err(Error::Config("divergence matrix needs at least two domains".into()));
    }
    if let Some(d) = domains.iter().find(|d| d.vocab_digest != domains[0].vocab_digest) {
        return Err(Error::VocabMismatch { ticket: domains[0].vocab_digest.clone(), target: d.vocab_digest.clone() });
    }
    let dists = domains.iter().map(unigram_distribution).collect::<Result<Vec<_>>>()?;
    let n = dists.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = jsd(&dists[i], &dists[j])?;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(DivergenceMatrix { names: domains.iter().map(|d| d.name.clone()).collect(), values })
}

impl DivergenceMatrix {
    /// CSV with a header row and a leading column of domain names. Values are
    /// multiplied by `scale` (1e5 reproduces the customary display units).
    pub fn write_csv<W: Write>(&self, out: W, scale: f64) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["domain".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.names.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{}", v * scale)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Off-diagonal pairs `(i, j)` with `i < j`, sorted by divergence.
    pub fn ranked_pairs(&self) -> Vec<(usize, usize, f64)> {
        let n = self.names.len();
        let mut pairs: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| (i, j, self.values[i][j])).collect();
        pairs.sort_by(|a, b| a.2.total_cmp(&b.2));
        pairs
    }
}

/// Count of each label per split, for balance checks.
pub fn class_counts(split: &[Example]) -> BTreeMap<u8, usize> {
    let mut out = BTreeMap::new();
    for e in split {
        *out.entry(e.label).or_default() += 1;
    }
    out
}
