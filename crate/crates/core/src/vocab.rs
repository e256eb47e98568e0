//! Byte-pair-encoding subword vocabulary shared by every domain.
//!
//! Text is lowercased and split on whitespace. Each word becomes a word-start
//! marker `▁` followed by its characters; merges are learned greedily by pair
//! frequency with lexicographic tie-breaking. Characters outside the coverage
//! fraction map to the unknown id and never take part in merges.
//!
//! Encoding replays the learned merges in rank order, which reproduces the
//! training-time segmentation of every training word exactly.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_PIECE: &str = "<pad>";
pub const UNK_PIECE: &str = "<unk>";
pub const WORD_MARKER: char = '\u{2581}';

const HEADER_MAGIC: &str = "bpe v1";
const MERGES_SECTION: &str = "#merges";

#[derive(Debug, Clone)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    /// pair -> ascending merge ranks (a pair can recur when two merges yield the same string)
    ranks: HashMap<(u32, u32), Vec<usize>>,
    coverage: f64,
}

/// A fixed-length id sequence plus the token count before truncation/padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqEncoding {
    pub ids: Vec<u32>,
    pub original_len: usize,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

fn text_chars(text: &str) -> impl Iterator<Item = char> + '_ {
    words(text).flat_map(|w| w.chars().collect::<Vec<_>>())
}

/// Characters retained under `coverage`, most frequent first until the
/// cumulative share reaches the threshold.
fn retained_chars<'a>(corpus: impl IntoIterator<Item = &'a str>, coverage: f64) -> BTreeSet<char> {
    let mut counts: HashMap<char, u64> = HashMap::new();
    for text in corpus {
        for c in text_chars(text) {
            if c != WORD_MARKER {
                *counts.entry(c).or_default() += 1;
            }
        }
    }
    let total: u64 = counts.values().sum();
    let mut ordered: Vec<(char, u64)> = counts.into_iter().collect();
    ordered.sort_by_key(|&(c, n)| (Reverse(n), c));
    let mut kept = BTreeSet::new();
    let mut cum = 0u64;
    for (c, n) in ordered {
        if coverage < 1.0 && total > 0 && cum as f64 >= coverage * total as f64 {
            break;
        }
        kept.insert(c);
        cum += n;
    }
    kept
}

impl SubwordVocab {
    /// Learns a vocabulary of at most `target_size` pieces.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_size: usize, coverage: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("bpe_train"));
        }
        if !(coverage > 0.0 && coverage <= 1.0) {
            return Err(Error::Config(format!("character coverage {coverage} outside (0, 1]")));
        }
        let chars = retained_chars(corpus.iter().map(AsRef::as_ref), coverage);
        let mut vocab = SubwordVocab::with_base(&chars, coverage);
        if target_size < vocab.pieces.len() {
            return Err(Error::Config(format!(
                "target vocabulary size {target_size} smaller than base character count {}",
                vocab.pieces.len()
            )));
        }

        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for text in corpus {
            for w in words(text.as_ref()) {
                *word_freq.entry(w).or_default() += 1;
            }
        }
        let mut trainer = MergeTrainer::new(word_freq.iter().map(|(w, &f)| (vocab.base_symbols(w), f)).collect());
        while vocab.pieces.len() < target_size {
            let Some((count, pair)) = trainer.best(&vocab.pieces) else { break };
            if count < 2 {
                break;
            }
            let merged = format!("{}{}", vocab.pieces[pair.0 as usize], vocab.pieces[pair.1 as usize]);
            let id = vocab.intern(merged);
            vocab.push_merge(pair);
            trainer.apply(pair, id);
        }
        Ok(vocab)
    }

    fn with_base(chars: &BTreeSet<char>, coverage: f64) -> Self {
        let mut v = SubwordVocab { pieces: Vec::new(), index: HashMap::new(), merges: Vec::new(), ranks: HashMap::new(), coverage };
        v.intern(PAD_PIECE.to_string());
        v.intern(UNK_PIECE.to_string());
        v.intern(WORD_MARKER.to_string());
        for c in chars {
            v.intern(c.to_string());
        }
        v
    }

    fn intern(&mut self, piece: String) -> u32 {
        if let Some(&id) = self.index.get(&piece) {
            return id;
        }
        let id = self.pieces.len() as u32;
        self.index.insert(piece.clone(), id);
        self.pieces.push(piece);
        id
    }

    fn push_merge(&mut self, pair: (u32, u32)) {
        self.ranks.entry(pair).or_default().push(self.merges.len());
        self.merges.push(pair);
    }

    /// Marker plus per-character ids of one (already lowercased) word.
    fn base_symbols(&self, word: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(word.chars().count() + 1);
        out.push(self.index[&WORD_MARKER.to_string()]);
        let mut buf = [0u8; 4];
        for c in word.chars() {
            let id = if c == WORD_MARKER { None } else { self.index.get(&*c.encode_utf8(&mut buf)).copied() };
            out.push(id.unwrap_or(UNK_ID));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Learned merges as piece pairs, in rank order.
    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.merges.iter().map(|&(a, b)| (self.pieces[a as usize].as_str(), self.pieces[b as usize].as_str()))
    }

    fn segment_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms = self.base_symbols(word);
        let mut last: Option<usize> = None;
        loop {
            let next = syms
                .windows(2)
                .filter_map(|w| {
                    let ranks = self.ranks.get(&(w[0], w[1]))?;
                    let from = last.map_or(0, |l| ranks.partition_point(|&r| r <= l));
                    ranks.get(from).copied()
                })
                .min();
            let Some(rank) = next else { break };
            let (a, b) = self.merges[rank];
            let merged = self.index[&format!("{}{}", self.pieces[a as usize], self.pieces[b as usize])];
            syms = merge_pair(&syms, (a, b), merged);
            last = Some(rank);
        }
        out.extend(syms);
    }

    /// Subword ids of `text` without truncation or padding.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for w in words(text) {
            self.segment_word(&w, &mut ids);
        }
        ids
    }

    /// Segments, truncates to `max_len` and right-pads with [`PAD_ID`].
    pub fn encode(&self, text: &str, max_len: usize) -> SeqEncoding {
        let mut ids = self.tokenize(text);
        let original_len = ids.len();
        ids.resize(max_len, PAD_ID);
        SeqEncoding { ids, original_len }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == PAD_ID {
                continue;
            }
            s.push_str(self.piece(id).unwrap_or(UNK_PIECE));
        }
        s.replace(WORD_MARKER, " ").trim_start().to_string()
    }

    /// Share of non-whitespace characters in `corpus` that map to a known piece.
    pub fn char_coverage<S: AsRef<str>>(&self, corpus: &[S]) -> Result<f64> {
        let mut total = 0u64;
        let mut known = 0u64;
        let mut buf = [0u8; 4];
        for text in corpus {
            for c in text_chars(text.as_ref()) {
                total += 1;
                if c != WORD_MARKER && self.index.contains_key(&*c.encode_utf8(&mut buf)) {
                    known += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::EmptyInput("char_coverage"));
        }
        Ok(known as f64 / total as f64)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER_MAGIC} size={} coverage={}", self.pieces.len(), self.coverage);
        for (id, p) in self.pieces.iter().enumerate() {
            let _ = writeln!(s, "{p}\t{id}");
        }
        let _ = writeln!(s, "{MERGES_SECTION}");
        for (a, b) in self.merges() {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Data(format!("vocabulary line {line}: {what}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let rest = header.strip_prefix(HEADER_MAGIC).ok_or_else(|| bad(1, "bad magic"))?;
        let mut size = None;
        let mut coverage = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("size", v)) => size = v.parse::<usize>().ok(),
                Some(("coverage", v)) => coverage = v.parse::<f64>().ok(),
                _ => return Err(bad(1, "unknown header field")),
            }
        }
        let (size, coverage) = size.zip(coverage).ok_or_else(|| bad(1, "header needs size and coverage"))?;

        let mut v = SubwordVocab { pieces: Vec::with_capacity(size), index: HashMap::new(), merges: Vec::new(), ranks: HashMap::new(), coverage };
        for _ in 0..size {
            let (n, line) = lines.next().ok_or_else(|| bad(0, "truncated piece list"))?;
            let (piece, id) = line.split_once('\t').ok_or_else(|| bad(n, "expected <piece>\\t<id>"))?;
            if id.parse::<usize>().ok() != Some(v.pieces.len()) || v.index.contains_key(piece) {
                return Err(bad(n, "ids must be dense and pieces unique"));
            }
            v.intern(piece.to_string());
        }
        match lines.next() {
            Some((_, MERGES_SECTION)) => {}
            Some((n, _)) => return Err(bad(n, "expected #merges")),
            None => return Err(bad(0, "missing #merges section")),
        }
        for (n, line) in lines {
            let (a, b) = line.split_once(' ').ok_or_else(|| bad(n, "expected <left> <right>"))?;
            let (Some(ia), Some(ib)) = (v.id(a), v.id(b)) else {
                return Err(bad(n, "merge references unknown piece"));
            };
            if v.id(&format!("{a}{b}")).is_none() {
                return Err(bad(n, "merge result missing from pieces"));
            }
            v.push_merge((ia, ib));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn merge_pair(syms: &[u32], pair: (u32, u32), merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(merged);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

/// Incremental pair statistics over the unique words of the corpus.
struct MergeTrainer {
    words: Vec<Vec<u32>>,
    freqs: Vec<u64>,
    counts: HashMap<(u32, u32), u64>,
    occurs: HashMap<(u32, u32), BTreeSet<usize>>,
}

impl MergeTrainer {
    fn new(words: Vec<(Vec<u32>, u64)>) -> Self {
        let (words, freqs): (Vec<_>, Vec<_>) = words.into_iter().unzip();
        let mut t = MergeTrainer { words, freqs, counts: HashMap::new(), occurs: HashMap::new() };
        for w in 0..t.words.len() {
            t.add_word(w, 1);
        }
        t
    }

    fn pairs(word: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
        word.windows(2).map(|p| (p[0], p[1])).filter(|&(a, b)| a != UNK_ID && b != UNK_ID)
    }

    fn add_word(&mut self, w: usize, sign: i64) {
        let f = self.freqs[w];
        for pair in Self::pairs(&self.words[w]) {
            let c = self.counts.entry(pair).or_default();
            if sign > 0 {
                *c += f;
                self.occurs.entry(pair).or_default().insert(w);
            } else {
                *c -= f;
            }
        }
    }

    /// Most frequent pair; ties go to the lexicographically smallest (left, right).
    fn best(&self, pieces: &[String]) -> Option<(u64, (u32, u32))> {
        self.counts
            .iter()
            .filter(|&(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                    let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, &c)| (c, p))
    }

    fn apply(&mut self, pair: (u32, u32), merged: u32) {
        let affected = self.occurs.remove(&pair).unwrap_or_default();
        for w in affected {
            self.add_word(w, -1);
            self.words[w] = merge_pair(&self.words[w], pair, merged);
            self.add_word(w, 1);
        }
        self.counts.retain(|_, c| *c > 0);
    }
}
