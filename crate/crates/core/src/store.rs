//! `TKT1` ticket files and run directories.
//!
//! Layout of a ticket file (all integers little-endian):
//!
//! ```text
//! "TKT1" | u32 header length | header (sorted key=value lines, UTF-8)
//! | per layer: bit-packed mask of the layer's tensors (LSB first),
//!   then the layer's θ0 as f32 when stored inline
//! | u64 checksum (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! A run directory keeps θ0 once in `theta0.bin`; the per-round tickets under
//! `tickets/` refer to it by digest (`theta0=external`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lottery::InitStrategy;
use crate::model::{ModelConfig, ParamSet};
use crate::pruning::{MaskSet, PruneConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TKT1";
const FORMAT_VERSION: u32 = 1;

/// A mask together with the initial values it is meant to be applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct Ticket {
    pub round: usize,
    pub mask: MaskSet,
    pub theta0: Arc<ParamSet<f32>>,
    pub model: ModelConfig,
    pub prune: PruneConfig,
    pub vocab_digest: String,
    pub domain: String,
    pub seed: u64,
    pub strategy: InitStrategy,
}

/// Content digest of a parameter set: names, shapes and f32 bits.
pub fn theta0_digest(params: &ParamSet<f32>) -> String {
    let mut h = Sha256::new();
    for (s, t) in params.specs().iter().zip(params.tensors()) {
        h.update(s.name.as_bytes());
        h.update([0u8]);
        for &d in &s.shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn header(t: &Ticket, inline: bool) -> BTreeMap<String, String> {
    let m = &t.model;
    let mut h = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        h.insert(k.to_string(), v);
    };
    put("format", FORMAT_VERSION.to_string());
    put("round", t.round.to_string());
    put("domain", t.domain.clone());
    put("seed", t.seed.to_string());
    put("strategy", t.strategy.to_string());
    put("vocab_digest", t.vocab_digest.clone());
    put("model.vocab_size", m.vocab_size.to_string());
    put("model.embed_dim", m.embed_dim.to_string());
    put("model.filter_heights", m.filter_heights.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    put("model.channels", m.channels.to_string());
    put("model.mlp_hidden", m.mlp_hidden.to_string());
    put("model.num_classes", m.num_classes.to_string());
    put("model.max_len", m.max_len.to_string());
    put("model.dropout", m.dropout.to_string());
    put("prune.fraction", t.prune.fraction.to_string());
    put("prune.rounds", t.prune.rounds.to_string());
    put("prune.keep_rule", t.prune.keep_rule.to_string());
    put("theta0", if inline { "inline" } else { "external" }.to_string());
    put("theta0_digest", theta0_digest(&t.theta0));
    for s in m.param_specs() {
        put(&format!("shape.{}", s.name), s.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x"));
    }
    h
}

fn layer_groups(model: &ModelConfig) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); model.num_layers()];
    for (i, s) in model.param_specs().iter().enumerate() {
        groups[s.layer].push(i);
    }
    groups
}

/// Serialized ticket bytes.
pub fn encode_ticket(t: &Ticket, inline: bool) -> Result<Vec<u8>> {
    let specs = t.model.param_specs();
    if t.mask.shapes().len() != specs.len() || t.mask.shapes().iter().zip(&specs).any(|(a, s)| *a != s.shape) {
        return Err(Error::Config("ticket mask does not match its model config".into()));
    }
    if t.theta0.specs() != specs.as_slice() {
        return Err(Error::Config("ticket initial parameters do not match its model config".into()));
    }
    let text: String = header(t, inline).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mut out = Vec::with_capacity(16 + text.len() + if inline { t.theta0.total_len() * 4 } else { 0 });
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for group in layer_groups(&t.model) {
        let bits: Vec<bool> = group.iter().flat_map(|&i| t.mask.masks()[i].iter().copied()).collect();
        let mut packed = vec![0u8; bits.len().div_ceil(8)];
        for (j, &b) in bits.iter().enumerate() {
            if b {
                packed[j / 8] |= 1 << (j % 8);
            }
        }
        out.extend_from_slice(&packed);
        if inline {
            for &i in &group {
                for v in t.theta0.tensors()[i].data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes a self-contained ticket (θ0 inline) and returns the file digest.
pub fn save_ticket(t: &Ticket, path: &Path) -> Result<String> {
    let bytes = encode_ticket(t, true)?;
    write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes a ticket that refers to θ0 by digest; see [`RunDir`].
pub fn save_ticket_external(t: &Ticket, path: &Path) -> Result<String> {
    let bytes = encode_ticket(t, false)?;
    write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(self.path, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::TicketFormat { path: path.to_path_buf(), reason: reason.into() }
}

fn field<T: std::str::FromStr>(path: &Path, h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = h.get(key).ok_or_else(|| format_err(path, format!("missing header key {key}")))?;
    raw.parse().map_err(|_| format_err(path, format!("bad value for {key}: {raw:?}")))
}

/// Parses ticket bytes. External θ0 must be supplied by the caller.
pub fn decode_ticket(path: &Path, bytes: &[u8], external: Option<Arc<ParamSet<f32>>>) -> Result<Ticket> {
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(format_err(path, "truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, "not a TKT1 file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if checksum(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Checksum { path: path.to_path_buf() });
    }
    let mut cur = Cursor { path, bytes: body, pos: 4 };
    let hlen = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
    let text = std::str::from_utf8(cur.take(hlen)?).map_err(|_| format_err(path, "header is not UTF-8"))?;
    let mut h = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| format_err(path, format!("bad header line {line:?}")))?;
        h.insert(k.to_string(), v.to_string());
    }
    let version: u32 = field(path, &h, "format")?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {version}")));
    }
    let heights: String = field(path, &h, "model.filter_heights")?;
    let model = ModelConfig {
        vocab_size: field(path, &h, "model.vocab_size")?,
        embed_dim: field(path, &h, "model.embed_dim")?,
        filter_heights: heights
            .split(',')
            .map(|s| s.parse().map_err(|_| format_err(path, format!("bad filter height {s:?}"))))
            .collect::<Result<_>>()?,
        channels: field(path, &h, "model.channels")?,
        mlp_hidden: field(path, &h, "model.mlp_hidden")?,
        num_classes: field(path, &h, "model.num_classes")?,
        max_len: field(path, &h, "model.max_len")?,
        dropout: field(path, &h, "model.dropout")?,
    };
    model.validate().map_err(|e| format_err(path, e.to_string()))?;
    let prune = PruneConfig {
        fraction: field(path, &h, "prune.fraction")?,
        rounds: field(path, &h, "prune.rounds")?,
        keep_rule: field(path, &h, "prune.keep_rule")?,
    };
    let specs = model.param_specs();
    for s in &specs {
        let stored: String = field(path, &h, &format!("shape.{}", s.name))?;
        let want = s.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        if stored != want {
            return Err(format_err(path, format!("shape of {} is {stored}, model config implies {want}", s.name)));
        }
    }
    let inline = match field::<String>(path, &h, "theta0")?.as_str() {
        "inline" => true,
        "external" => false,
        other => return Err(format_err(path, format!("bad theta0 mode {other:?}"))),
    };

    let mut masks: Vec<Vec<bool>> = specs.iter().map(|s| Vec::with_capacity(s.len())).collect();
    let mut values: Vec<Vec<f32>> = vec![Vec::new(); specs.len()];
    for group in layer_groups(&model) {
        let nbits: usize = group.iter().map(|&i| specs[i].len()).sum();
        let packed = cur.take(nbits.div_ceil(8))?;
        let mut j = 0;
        for &i in &group {
            for _ in 0..specs[i].len() {
                masks[i].push(packed[j / 8] >> (j % 8) & 1 == 1);
                j += 1;
            }
        }
        if inline {
            for &i in &group {
                let raw = cur.take(specs[i].len() * 4)?;
                values[i] = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            }
        }
    }
    if cur.pos != body.len() {
        return Err(format_err(path, "trailing bytes after last layer"));
    }
    let theta0 = if inline {
        let tensors = specs.iter().zip(values).map(|(s, v)| Tensor::new(s.shape.clone(), v)).collect::<Result<Vec<_>>>()?;
        Arc::new(ParamSet::from_tensors(&model, tensors)?)
    } else {
        external.ok_or_else(|| format_err(path, "initial parameters stored externally and none supplied"))?
    };
    let digest: String = field(path, &h, "theta0_digest")?;
    if theta0_digest(&theta0) != digest {
        return Err(format_err(path, "initial parameters do not match the recorded digest"));
    }
    Ok(Ticket {
        round: field(path, &h, "round")?,
        mask: MaskSet::from_bits(&model, field(path, &h, "round")?, masks)?,
        theta0,
        prune,
        vocab_digest: field(path, &h, "vocab_digest")?,
        domain: field(path, &h, "domain")?,
        seed: field(path, &h, "seed")?,
        strategy: field(path, &h, "strategy")?,
        model,
    })
}

/// Loads a ticket. Externally stored θ0 is looked up as `theta0.bin` next to
/// the file or one directory up.
pub fn load_ticket(path: &Path) -> Result<Ticket> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match decode_ticket(path, &bytes, None) {
        Err(Error::TicketFormat { reason, .. }) if reason.starts_with("initial parameters stored externally") => {
            let dir = path.parent().unwrap_or(Path::new("."));
            let candidates = [dir.join(THETA0_FILE), dir.join("..").join(THETA0_FILE)];
            let found = candidates.iter().find(|p| p.exists()).ok_or_else(|| format_err(path, "external initial parameters not found"))?;
            let theta0 = load_ticket(found)?.theta0;
            decode_ticket(path, &bytes, Some(theta0))
        }
        other => other,
    }
}

pub const THETA0_FILE: &str = "theta0.bin";
pub const VOCAB_FILE: &str = "vocab";
pub const RECORDS_FILE: &str = "records.csv";

/// `runs/<run-id>/{vocab, theta0.bin, tickets/round-<i>.tkt, records.csv}`.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join(VOCAB_FILE)
    }

    pub fn theta0_path(&self) -> PathBuf {
        self.root.join(THETA0_FILE)
    }

    pub fn records_path(&self) -> PathBuf {
        self.root.join(RECORDS_FILE)
    }

    pub fn ticket_path(&self, round: usize) -> PathBuf {
        self.root.join("tickets").join(format!("round-{round}.tkt"))
    }

    /// Writes θ0 (as a round-0, all-ones ticket) and every round's ticket.
    pub fn write_tickets(&self, tickets: &[Ticket]) -> Result<()> {
        let Some(first) = tickets.first() else {
            return Ok(());
        };
        let base = Ticket { round: 0, mask: MaskSet::ones(&first.model), ..first.clone() };
        save_ticket(&base, &self.theta0_path())?;
        for t in tickets {
            if !Arc::ptr_eq(&t.theta0, &first.theta0) && t.theta0 != first.theta0 {
                return Err(Error::Config("tickets of one run must share their initial parameters".into()));
            }
            save_ticket_external(t, &self.ticket_path(t.round))?;
        }
        Ok(())
    }

    /// Loads `tickets/round-1.tkt`, `round-2.tkt`, ... until the first gap.
    pub fn load_tickets(&self) -> Result<Vec<Ticket>> {
        let theta0 = load_ticket(&self.theta0_path())?.theta0;
        let mut out = Vec::new();
        for round in 1.. {
            let p = self.ticket_path(round);
            if !p.exists() {
                break;
            }
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            out.push(decode_ticket(&p, &bytes, Some(Arc::clone(&theta0)))?);
        }
        Ok(out)
    }
}
