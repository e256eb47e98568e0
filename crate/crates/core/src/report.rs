//! Across-seed summaries of per-round accuracy records.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and sample standard deviation (n-1; zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// One point of an accuracy-versus-sparsity curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub sparsity: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// A single seed's observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// domain for obtain runs, `source->target` for transfer cells
    pub group: String,
    pub strategy: String,
    pub round: usize,
    pub sparsity: f64,
    pub accuracy: f64,
}

pub type Curves = BTreeMap<(String, String), Vec<CurvePoint>>;

/// Groups by (group, strategy), then averages each round across seeds.
pub fn summarize(obs: &[Observation]) -> Curves {
    // per round: sparsities and accuracies across seeds
    type Rounds = BTreeMap<usize, (Vec<f64>, Vec<f64>)>;
    let mut acc: BTreeMap<(String, String), Rounds> = BTreeMap::new();
    for o in obs {
        let e = acc.entry((o.group.clone(), o.strategy.clone())).or_default().entry(o.round).or_default();
        e.0.push(o.accuracy);
        e.1.push(o.sparsity);
    }
    acc.into_iter()
        .map(|(k, rounds)| {
            let points = rounds
                .into_iter()
                .map(|(round, (accs, sps))| {
                    let (mean, std) = mean_std(&accs).expect("non-empty");
                    CurvePoint { round, sparsity: mean_std(&sps).expect("non-empty").0, mean, std, n: accs.len() }
                })
                .collect();
            (k, points)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct LongRow<'a> {
    group: &'a str,
    strategy: &'a str,
    round: usize,
    sparsity: f64,
    mean_test_acc: f64,
    std_test_acc: f64,
    n: usize,
}

/// Long-format CSV: `group,strategy,round,sparsity,mean_test_acc,std_test_acc,n`.
pub fn write_curves<W: Write>(out: W, curves: &Curves) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for ((group, strategy), points) in curves {
        for p in points {
            w.serialize(LongRow { group, strategy, round: p.round, sparsity: p.sparsity, mean_test_acc: p.mean, std_test_acc: p.std, n: p.n })?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads a records CSV written by the obtain or transfer phase.
pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (round, sparsity, test) = match (col("round"), col("sparsity"), col("test_acc")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Data(format!("{}:1: expected round, sparsity and test_acc columns", path.display()))),
    };
    let strategy = col("strategy").ok_or_else(|| Error::Data(format!("{}:1: missing strategy column", path.display())))?;
    let group: Box<dyn Fn(&csv::StringRecord) -> String> = match (col("domain"), col("source"), col("target")) {
        (Some(d), _, _) => Box::new(move |r| r[d].to_string()),
        (None, Some(s), Some(t)) => Box::new(move |r| format!("{}->{}", &r[s], &r[t])),
        _ => return Err(Error::Data(format!("{}:1: expected a domain or source/target columns", path.display()))),
    };
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let bad = |what: &str| Error::Data(format!("{}:{line}: {what}", path.display()));
        let rec = rec.map_err(|e| bad(&e.to_string()))?;
        let num = |c: usize, what: &str| -> Result<f64> {
            rec.get(c).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad(&format!("bad {what} value")))
        };
        out.push(Observation {
            group: group(&rec),
            strategy: rec[strategy].to_string(),
            round: rec.get(round).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad round value"))?,
            sparsity: num(sparsity, "sparsity")?,
            accuracy: num(test, "test_acc")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_accuracy_has_zero_spread() {
        let (m, s) = mean_std(&[0.8; 5]).unwrap();
        assert!((m - 0.8).abs() < 1e-15);
        assert_eq!(s, 0.0);
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[0.3]), Some((0.3, 0.0)));
    }

    #[test]
    fn matches_hand_computation() {
        // values 0.7, 0.8, 0.9, 0.6, 1.0 -> mean 0.8, sample var 0.025
        let (m, s) = mean_std(&[0.7, 0.8, 0.9, 0.6, 1.0]).unwrap();
        assert!((m - 0.8).abs() < 1e-12);
        assert!((s - 0.025f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn summarize_groups_and_orders() {
        let o = |g: &str, s: &str, r, a| Observation { group: g.into(), strategy: s.into(), round: r, sparsity: r as f64 / 10.0, accuracy: a };
        let obs = vec![o("b", "reset", 1, 0.5), o("a", "reset", 1, 0.7), o("a", "reset", 0, 0.9), o("a", "reset", 1, 0.9)];
        let c = summarize(&obs);
        let keys: Vec<_> = c.keys().cloned().collect();
        assert_eq!(keys, vec![("a".to_string(), "reset".to_string()), ("b".to_string(), "reset".to_string())]);
        let a = &c[&("a".to_string(), "reset".to_string())];
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].n, 2);
        assert!((a[1].mean - 0.8).abs() < 1e-12);
    }

    #[test]
    fn malformed_csv_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "round,sparsity,val_acc,test_acc,stop_epoch,strategy,domain,seed\n0,0,0.9,0.9,3,reset,a,1\n1,x,0.9,0.9,3,reset,a,1\n").unwrap();
        let err = read_observations(&p).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}
