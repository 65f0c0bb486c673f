//! Query routing: decides per question whether to answer directly or which
//! knowledge base to retrieve from.
//!
//! The classifier is multinomial softmax regression over signed, hashed word
//! unigrams and bigrams, trained with class-weighted cross-entropy and AdamW
//! under a linear-to-zero learning-rate schedule.

mod features;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kb_store::Modality;
use crate::{Error, Result};

pub use features::{featurize, tokenize, SparseFeatures, DEFAULT_FEATURE_DIM};
pub use model::{ModelSummary, RouterModel, Routing};
pub use train::{
    class_weights, loss_and_grad, read_examples, train_router, write_examples, Gradients,
    LabeledFeatures, RoutingExample, TrainConfig, TrainReport, TrainedRouter,
};

/// A retrieval decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Decision {
    /// Answer from the generator's parametric knowledge; no retrieval.
    #[serde(rename = "NA")]
    Na,
    Visual,
    Textual,
    /// Retrieve from both knowledge bases, visual hits first.
    Hybrid,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Na => "NA",
            Decision::Visual => "Visual",
            Decision::Textual => "Textual",
            Decision::Hybrid => "Hybrid",
        }
    }

    /// The knowledge bases this decision retrieves from, in prompt order.
    pub fn modalities(self) -> &'static [Modality] {
        match self {
            Decision::Na => &[],
            Decision::Visual => &[Modality::Visual],
            Decision::Textual => &[Modality::Textual],
            Decision::Hybrid => &[Modality::Visual, Modality::Textual],
        }
    }

    pub fn retrieves(self) -> bool {
        self != Decision::Na
    }
}

impl From<Modality> for Decision {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Visual => Decision::Visual,
            Modality::Textual => Decision::Textual,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "na" | "none" => Ok(Decision::Na),
            "visual" => Ok(Decision::Visual),
            "textual" => Ok(Decision::Textual),
            "hybrid" => Ok(Decision::Hybrid),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

/// The ordered set of decisions a router can emit. Order matters: it is the
/// tie-break order for argmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Decision>", into = "Vec<Decision>")]
pub struct LabelSet(Vec<Decision>);

impl LabelSet {
    pub fn new(labels: Vec<Decision>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Config("a label set needs at least two labels".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("label {l} listed twice")));
            }
        }
        Ok(LabelSet(labels))
    }

    /// NA, Visual, Textual plus Hybrid.
    pub fn with_hybrid() -> Self {
        LabelSet(vec![
            Decision::Na,
            Decision::Visual,
            Decision::Textual,
            Decision::Hybrid,
        ])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[Decision] {
        &self.0
    }

    pub fn index_of(&self, d: Decision) -> Option<usize> {
        self.0.iter().position(|&l| l == d)
    }

    pub fn get(&self, i: usize) -> Decision {
        self.0[i]
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet(vec![Decision::Na, Decision::Visual, Decision::Textual])
    }
}

impl TryFrom<Vec<Decision>> for LabelSet {
    type Error = Error;
    fn try_from(v: Vec<Decision>) -> Result<Self> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<Decision> {
    fn from(l: LabelSet) -> Self {
        l.0
    }
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
