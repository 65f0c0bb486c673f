//! Answer scoring: token-level F1 and exact match over normalized answers.
//!
//! Normalization lowercases, deletes ASCII punctuation, drops the articles
//! "a", "an" and "the", and splits on whitespace.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    F1,
    Em,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::F1 => "f1",
            Metric::Em => "em",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(Metric::F1),
            "em" | "exact_match" => Ok(Metric::Em),
            _ => Err(Error::Invalid(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub metric: Metric,
}

pub fn normalize_answer(s: &str) -> Vec<String> {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn f1_score(pred: &str, gold: &str) -> Score {
    Score {
        value: token_f1(&normalize_answer(pred), &normalize_answer(gold)),
        metric: Metric::F1,
    }
}

pub fn exact_match(pred: &str, gold: &str) -> Score {
    let same = normalize_answer(pred) == normalize_answer(gold);
    Score {
        value: if same { 1.0 } else { 0.0 },
        metric: Metric::Em,
    }
}

pub fn score(pred: &str, gold: &str, metric: Metric) -> Score {
    match metric {
        Metric::F1 => f1_score(pred, gold),
        Metric::Em => exact_match(pred, gold),
    }
}

/// Best score of `pred` against any of the gold answers.
pub fn evaluate(pred: &str, golds: &[String], metric: Metric) -> Result<Score> {
    if golds.is_empty() {
        return Err(Error::EmptyInput("gold answers"));
    }
    let value = golds
        .iter()
        .map(|g| score(pred, g, metric).value)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Score { value, metric })
}

/// A prediction to score, as read from a predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(default)]
    pub id: Option<String>,
    pub prediction: String,
    pub golds: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreSummary {
    pub metric: Metric,
    pub count: usize,
    pub mean: f64,
    pub per_item: Vec<(Option<String>, f64)>,
}

pub fn score_predictions(preds: &[Prediction], metric: Metric) -> Result<ScoreSummary> {
    let per_item = preds
        .iter()
        .map(|p| Ok((p.id.clone(), evaluate(&p.prediction, &p.golds, metric)?.value)))
        .collect::<Result<Vec<_>>>()?;
    let mean = if per_item.is_empty() {
        0.0
    } else {
        per_item.iter().map(|(_, v)| v).sum::<f64>() / per_item.len() as f64
    };
    Ok(ScoreSummary {
        metric,
        count: per_item.len(),
        mean,
        per_item,
    })
}
