//! Offline retrieval-quality metrics with binary relevance.
//!
//! Per query, with `R` the relevant set and hits counted in the top `k`:
//!
//! - MRR@k: `1 / rank` of the first relevant hit, else 0.
//! - Recall@k: `|hits| / |R|`.
//! - mAP@k: sum of precision at each relevant rank, over `min(|R|, k)`.
//! - NDCG@k: `Σ 1/log2(rank+1)` over relevant ranks, divided by the same sum
//!   for an ideal ranking of `min(|R|, k)` relevant documents.
//!
//! All four are averaged over the queries present in the run.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;

use crate::{Error, Result};

/// Per-query ranked document ids.
pub type Runs = BTreeMap<String, Vec<String>>;
/// Per-query relevant document ids.
pub type Qrels = BTreeMap<String, HashSet<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IrMetrics {
    pub k: usize,
    pub queries: usize,
    pub mrr: f64,
    pub recall: f64,
    pub map: f64,
    pub ndcg: f64,
}

pub fn retrieval_metrics(runs: &Runs, qrels: &Qrels, k: usize) -> Result<IrMetrics> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let mut sums = [0.0f64; 4];
    for (qid, ranked) in runs {
        let relevant = qrels
            .get(qid)
            .ok_or_else(|| Error::MissingQrels(qid.clone()))?;
        let mut seen = HashSet::with_capacity(ranked.len());
        if let Some(dup) = ranked.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Invalid(format!(
                "query {qid:?} ranks document {dup:?} twice"
            )));
        }
        let mut first_hit = None;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut dcg = 0.0;
        for (i, id) in ranked.iter().take(k).enumerate() {
            let rank = i + 1;
            if relevant.contains(id) {
                hits += 1;
                first_hit.get_or_insert(rank);
                precision_sum += hits as f64 / rank as f64;
                dcg += 1.0 / ((rank + 1) as f64).log2();
            }
        }
        let ideal = relevant.len().min(k);
        let idcg: f64 = (1..=ideal).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
        sums[0] += first_hit.map_or(0.0, |r| 1.0 / r as f64);
        if !relevant.is_empty() {
            sums[1] += hits as f64 / relevant.len() as f64;
            sums[2] += precision_sum / ideal as f64;
            sums[3] += dcg / idcg;
        }
    }
    let n = runs.len();
    let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(IrMetrics {
        k,
        queries: n,
        mrr: mean(sums[0]),
        recall: mean(sums[1]),
        map: mean(sums[2]),
        ndcg: mean(sums[3]),
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads a TREC run file (`qid Q0 docid rank score tag`). Documents are ordered
/// by the rank column; the score column is ignored.
pub fn read_trec_run(path: &Path) -> Result<Runs> {
    let mut rows: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() < 4 {
            return Err(Error::MalformedRecord {
                line: i + 1,
                message: "expected `qid Q0 docid rank [score tag]`".into(),
            });
        }
        let rank: usize = cols[3].parse().map_err(|_| Error::MalformedRecord {
            line: i + 1,
            message: format!("bad rank {:?}", cols[3]),
        })?;
        rows.entry(cols[0].to_string())
            .or_default()
            .push((rank, cols[2].to_string()));
    }
    Ok(rows
        .into_iter()
        .map(|(q, mut docs)| {
            docs.sort_by_key(|(r, _)| *r);
            (q, docs.into_iter().map(|(_, d)| d).collect())
        })
        .collect())
}

/// Reads a TREC qrels file (`qid iter docid relevance`); relevance > 0 counts.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() < 4 {
            return Err(Error::MalformedRecord {
                line: i + 1,
                message: "expected `qid iter docid relevance`".into(),
            });
        }
        let rel: i64 = cols[3].parse().map_err(|_| Error::MalformedRecord {
            line: i + 1,
            message: format!("bad relevance {:?}", cols[3]),
        })?;
        let entry = qrels.entry(cols[0].to_string()).or_default();
        if rel > 0 {
            entry.insert(cols[2].to_string());
        }
    }
    Ok(qrels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(ranked: &[&str], relevant: &[&str]) -> (Runs, Qrels) {
        let mut runs = Runs::new();
        runs.insert("q".into(), ranked.iter().map(|s| s.to_string()).collect());
        let mut qrels = Qrels::new();
        qrels.insert("q".into(), relevant.iter().map(|s| s.to_string()).collect());
        (runs, qrels)
    }

    #[test]
    fn gold_at_rank_one() {
        let (r, q) = single(&["g", "a", "b"], &["g"]);
        let m = retrieval_metrics(&r, &q, 5).unwrap();
        assert_eq!(m.mrr, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.ndcg, 1.0);
        assert_eq!(m.map, 1.0);
    }

    #[test]
    fn gold_at_rank_three() {
        let (r, q) = single(&["a", "b", "g", "c"], &["g"]);
        let m = retrieval_metrics(&r, &q, 5).unwrap();
        assert!((m.mrr - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gold_at_rank_two_ndcg() {
        let (r, q) = single(&["a", "g", "b"], &["g"]);
        let m = retrieval_metrics(&r, &q, 5).unwrap();
        // (1 / log2 3) / (1 / log2 2)
        assert!((m.ndcg - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn gold_beyond_cutoff_scores_zero() {
        let (r, q) = single(&["a", "b", "g"], &["g"]);
        let m = retrieval_metrics(&r, &q, 2).unwrap();
        assert_eq!((m.mrr, m.recall, m.map, m.ndcg), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn missing_qrels_is_error() {
        let (r, _) = single(&["a"], &["a"]);
        assert!(matches!(
            retrieval_metrics(&r, &Qrels::new(), 5),
            Err(Error::MissingQrels(q)) if q == "q"
        ));
    }

    #[test]
    fn duplicate_ids_in_run_are_rejected() {
        let (r, q) = single(&["a", "a"], &["a"]);
        assert!(retrieval_metrics(&r, &q, 5).is_err());
    }

    #[test]
    fn trec_readers() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run.txt");
        let qrels = dir.path().join("qrels.txt");
        std::fs::write(&run, "q1 Q0 b 2 0.5 x\nq1 Q0 a 1 0.9 x\nq2 Q0 c 1 0.1 x\n").unwrap();
        std::fs::write(&qrels, "q1 0 b 1\nq1 0 a 0\nq2 0 z 1\n").unwrap();
        let runs = read_trec_run(&run).unwrap();
        assert_eq!(runs["q1"], ["a", "b"]);
        let qr = read_qrels(&qrels).unwrap();
        assert!(qr["q1"].contains("b") && !qr["q1"].contains("a"));
        let m = retrieval_metrics(&runs, &qr, 5).unwrap();
        assert!((m.mrr - 0.25).abs() < 1e-12);
    }
}
