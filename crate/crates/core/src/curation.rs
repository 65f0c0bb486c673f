//! Training-data construction from a QA set.
//!
//! Each pair is answered three ways (no retrieval, visual top-k, textual
//! top-k) and each answer is scored against the golds. The best strategy
//! becomes the router label; the worse of the two retrieval strategies picks
//! the modality for noise-resistance tuning examples. A separate builder pads
//! gold documents with random fillers to make fixed-size noisy contexts.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::eval_metrics::{evaluate, Metric};
use crate::flat_retriever::{IndexedKb, Retrieved, DEFAULT_K};
use crate::generation::{render_prompt, AnswerStyle, Generator, MockFixture, MockFixtures, PromptStyle};
use crate::hashing::hash64;
use crate::kb_store::{Document, KnowledgeBase, Modality};
use crate::router::{Decision, RoutingExample};
use crate::{jsonl, Error, Result, Stage};

/// Number of documents in every noise-set record.
pub const NOISE_SET_SIZE: usize = 5;

/// Exact ties in the best-strategy argmax go to the earliest entry.
pub const DEFAULT_TIE_ORDER: [Decision; 3] = [Decision::Na, Decision::Visual, Decision::Textual];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldDocIds {
    #[serde(default)]
    pub visual: Vec<String>,
    #[serde(default)]
    pub textual: Vec<String>,
}

impl GoldDocIds {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.visual.iter().chain(&self.textual)
    }

    pub fn len(&self) -> usize {
        self.visual.len() + self.textual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub golds: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_doc_ids: Option<GoldDocIds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parametric: Option<bool>,
}

impl QAPair {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::Invalid(format!("QA pair {:?}: {reason}", self.id));
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if self.question.trim().is_empty() {
            return Err(bad("empty question"));
        }
        if self.golds.is_empty() || self.golds.iter().any(|g| g.is_empty()) {
            return Err(bad("golds must be a non-empty list of non-empty strings"));
        }
        Ok(())
    }

    /// The mock generator's planted answer for this pair.
    pub fn mock_fixture(&self) -> MockFixture {
        MockFixture {
            doc_ids: self
                .gold_doc_ids
                .as_ref()
                .map(|g| g.all().cloned().collect())
                .unwrap_or_default(),
            answer: self.golds[0].clone(),
            parametric: self.parametric.unwrap_or(false),
        }
    }
}

/// Reads and validates a QA set. Duplicate pair ids are rejected because every
/// per-pair seed is derived from the id.
pub fn read_qaset(path: &Path) -> Result<Vec<QAPair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<(usize, QAPair)> = jsonl::read_records(std::io::BufReader::new(file))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, qa) in records {
        qa.validate().map_err(|e| Error::MalformedRecord {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(qa.id.clone()) {
            return Err(Error::DuplicateId { id: qa.id, line });
        }
        out.push(qa);
    }
    Ok(out)
}

pub fn mock_fixtures(qaset: &[QAPair]) -> MockFixtures {
    qaset
        .iter()
        .map(|qa| (qa.question.clone(), qa.mock_fixture()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyResponses {
    pub na: String,
    pub visual: String,
    pub textual: String,
}

/// Scores of the no-retrieval, visual and textual answers, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyScores {
    pub metric: Metric,
    pub s_na: f64,
    pub s_vis: f64,
    pub s_text: f64,
    pub responses: StrategyResponses,
}

impl StrategyScores {
    pub fn get(&self, d: Decision) -> Option<f64> {
        match d {
            Decision::Na => Some(self.s_na),
            Decision::Visual => Some(self.s_vis),
            Decision::Textual => Some(self.s_text),
            Decision::Hybrid => None,
        }
    }
}

/// Everything one self-assessment produced.
#[derive(Debug, Clone)]
pub struct Assessment {
    pub scores: StrategyScores,
    pub visual_docs: Vec<Retrieved>,
    pub textual_docs: Vec<Retrieved>,
}

impl Assessment {
    pub fn docs(&self, m: Modality) -> &[Retrieved] {
        match m {
            Modality::Visual => &self.visual_docs,
            Modality::Textual => &self.textual_docs,
        }
    }
}

#[derive(Clone, Copy)]
pub struct CurationDeps<'a> {
    pub visual: &'a IndexedKb,
    pub textual: &'a IndexedKb,
    pub embedder: &'a Embedder,
    pub generator: &'a dyn Generator,
    pub answer_style: AnswerStyle,
    pub k: usize,
    pub metric: Metric,
    /// Upper bound on concurrent generator calls.
    pub max_in_flight: usize,
}

impl<'a> CurationDeps<'a> {
    pub fn new(
        visual: &'a IndexedKb,
        textual: &'a IndexedKb,
        embedder: &'a Embedder,
        generator: &'a dyn Generator,
    ) -> Self {
        CurationDeps {
            visual,
            textual,
            embedder,
            generator,
            answer_style: AnswerStyle::Sentence,
            k: DEFAULT_K,
            metric: Metric::F1,
            max_in_flight: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if self.visual.modality() != Modality::Visual || self.textual.modality() != Modality::Textual {
            return Err(Error::Config("visual and textual indexes are swapped".into()));
        }
        let fp = self.embedder.fingerprint();
        for kb in [self.visual, self.textual] {
            if kb.index().fingerprint() != fp {
                return Err(Error::Config(format!(
                    "index {:?} was built with {:?}, embedder is {:?}",
                    kb.index().kb_name(),
                    kb.index().fingerprint(),
                    fp
                )));
            }
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.max_in_flight)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn answer(&self, qa: &QAPair, docs: Option<&[Retrieved]>, strategy: &str) -> Result<(String, f64)> {
        let (prompt, images) = match docs {
            None => (
                render_prompt(&qa.question, None, PromptStyle { answer: self.answer_style, with_context: false }),
                qa.image_path.iter().cloned().collect::<Vec<_>>(),
            ),
            Some(docs) => {
                let docs: Vec<Document> = docs.iter().map(|r| r.document.clone()).collect();
                let images = qa
                    .image_path
                    .iter()
                    .chain(docs.iter().filter_map(|d| d.image_path.as_ref()))
                    .cloned()
                    .collect();
                (
                    render_prompt(&qa.question, Some(&docs), PromptStyle { answer: self.answer_style, with_context: true }),
                    images,
                )
            }
        };
        let prompt = prompt?;
        let text = self
            .generator
            .generate(&prompt, &images)
            .map_err(|e| Error::Invalid(format!("{strategy} strategy: {e}")).at(Stage::Generate))?
            .text;
        let score = evaluate(&text, &qa.golds, self.metric).map_err(|e| e.at(Stage::Score))?;
        Ok((text, score.value))
    }
}

fn pair_seed(global: u64, id: &str) -> u64 {
    global ^ hash64(0, id.as_bytes())
}

/// Answers `qa` with no retrieval, visual top-k and textual top-k, and scores
/// each answer against the golds.
pub fn self_assess(qa: &QAPair, deps: &CurationDeps<'_>) -> Result<Assessment> {
    deps.validate()?;
    assess_one(qa, deps)
}

fn assess_one(qa: &QAPair, deps: &CurationDeps<'_>) -> Result<Assessment> {
    qa.validate()?;
    let q = deps
        .embedder
        .embed_query(&qa.question, qa.image_path.as_deref())
        .map_err(|e| e.at(Stage::Embed))?;
    let visual_docs = deps.visual.retrieve(&q, deps.k).map_err(|e| e.at(Stage::Retrieve))?;
    let textual_docs = deps.textual.retrieve(&q, deps.k).map_err(|e| e.at(Stage::Retrieve))?;
    let (na, (visual, textual)) = rayon::join(
        || deps.answer(qa, None, "na"),
        || {
            rayon::join(
                || deps.answer(qa, Some(&visual_docs), "visual"),
                || deps.answer(qa, Some(&textual_docs), "textual"),
            )
        },
    );
    let (na, visual, textual) = (na?, visual?, textual?);
    Ok(Assessment {
        scores: StrategyScores {
            metric: deps.metric,
            s_na: na.1,
            s_vis: visual.1,
            s_text: textual.1,
            responses: StrategyResponses {
                na: na.0,
                visual: visual.0,
                textual: textual.0,
            },
        },
        visual_docs,
        textual_docs,
    })
}

/// Why a pair produced no output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub id: String,
    pub stage: Option<Stage>,
    pub reason: String,
}

impl SkipRecord {
    fn from_error(id: &str, e: &Error) -> Self {
        SkipRecord {
            id: id.to_string(),
            stage: e.stage(),
            reason: e.to_string(),
        }
    }
}

/// Self-assesses every pair, in input order, fanning out over at most
/// `max_in_flight` threads.
pub fn assess_qaset(qaset: &[QAPair], deps: &CurationDeps<'_>) -> Result<Vec<Result<Assessment, SkipRecord>>> {
    deps.validate()?;
    let pool = deps.pool()?;
    Ok(pool.install(|| {
        qaset
            .par_iter()
            .map(|qa| assess_one(qa, deps).map_err(|e| SkipRecord::from_error(&qa.id, &e)))
            .collect()
    }))
}

/// Argmax over the three strategy scores; exact ties go to the earliest entry
/// of `tie_order`.
pub fn label_windsock(scores: &StrategyScores, tie_order: &[Decision; 3]) -> Decision {
    let mut best = tie_order[0];
    let mut best_score = scores.get(best).unwrap_or(f64::NEG_INFINITY);
    for &d in &tie_order[1..] {
        let s = scores.get(d).unwrap_or(f64::NEG_INFINITY);
        if s > best_score {
            best = d;
            best_score = s;
        }
    }
    best
}

/// How the tuning modality is chosen from the two retrieval scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    /// The modality with the lower score.
    #[default]
    Challenging,
    /// The modality with the higher score.
    Easy,
    /// A fair coin flip.
    Random,
}

impl std::str::FromStr for SelectionRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "challenging" => Ok(SelectionRule::Challenging),
            "easy" => Ok(SelectionRule::Easy),
            "random" => Ok(SelectionRule::Random),
            _ => Err(Error::Invalid(format!("unknown selection rule {s:?}"))),
        }
    }
}

fn coin(rng: &mut impl Rng) -> Modality {
    if rng.random_bool(0.5) {
        Modality::Visual
    } else {
        Modality::Textual
    }
}

/// The retrieval modality with the lower score. `s_na` is never consulted.
/// Exact ties draw from `rng` and report `tie_broken = true`.
pub fn select_challenging_modality(scores: &StrategyScores, rng: &mut impl Rng) -> (Modality, bool) {
    select_modality(scores, SelectionRule::Challenging, rng)
}

pub fn select_modality(scores: &StrategyScores, rule: SelectionRule, rng: &mut impl Rng) -> (Modality, bool) {
    let (v, t) = (scores.s_vis, scores.s_text);
    let lower = match v.partial_cmp(&t) {
        Some(std::cmp::Ordering::Less) => Modality::Visual,
        Some(std::cmp::Ordering::Greater) => Modality::Textual,
        _ => return (coin(rng), rule != SelectionRule::Random),
    };
    match rule {
        SelectionRule::Challenging => (lower, false),
        SelectionRule::Easy => (other(lower), false),
        SelectionRule::Random => (coin(rng), false),
    }
}

fn other(m: Modality) -> Modality {
    match m {
        Modality::Visual => Modality::Textual,
        Modality::Textual => Modality::Visual,
    }
}

/// One row of the self-assessment audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub id: String,
    pub question: String,
    pub scores: StrategyScores,
    pub label: Decision,
    pub visual_doc_ids: Vec<String>,
    pub textual_doc_ids: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct WindsockDataset {
    pub examples: Vec<RoutingExample>,
    pub ledger: Vec<LedgerRow>,
    pub skips: Vec<SkipRecord>,
}

fn doc_ids(docs: &[Retrieved]) -> Vec<String> {
    docs.iter().map(|r| r.scored.id.clone()).collect()
}

pub fn build_windsock_dataset(
    qaset: &[QAPair],
    deps: &CurationDeps<'_>,
    tie_order: &[Decision; 3],
) -> Result<WindsockDataset> {
    if !DEFAULT_TIE_ORDER.iter().all(|d| tie_order.contains(d)) {
        return Err(Error::Config("tie order must be a permutation of NA, Visual, Textual".into()));
    }
    let mut out = WindsockDataset::default();
    for (qa, result) in qaset.iter().zip(assess_qaset(qaset, deps)?) {
        match result {
            Ok(a) => {
                let label = label_windsock(&a.scores, tie_order);
                out.examples.push(RoutingExample {
                    question: qa.question.clone(),
                    label,
                });
                out.ledger.push(LedgerRow {
                    id: qa.id.clone(),
                    question: qa.question.clone(),
                    visual_doc_ids: doc_ids(&a.visual_docs),
                    textual_doc_ids: doc_ids(&a.textual_docs),
                    scores: a.scores,
                    label,
                });
            }
            Err(skip) => out.skips.push(skip),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DanceExample {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub modality: Modality,
    pub docs: Vec<Document>,
    pub answer: String,
    pub tie_broken: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DanceDataset {
    pub examples: Vec<DanceExample>,
    pub skips: Vec<SkipRecord>,
}

/// Emits one tuning example per pair from the modality picked by `rule`.
/// Tie draws use a per-pair generator seeded from `seed` and the pair id.
pub fn build_dance_dataset(
    qaset: &[QAPair],
    deps: &CurationDeps<'_>,
    seed: u64,
    rule: SelectionRule,
) -> Result<DanceDataset> {
    let mut out = DanceDataset::default();
    for (qa, result) in qaset.iter().zip(assess_qaset(qaset, deps)?) {
        let a = match result {
            Ok(a) => a,
            Err(skip) => {
                out.skips.push(skip);
                continue;
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, &qa.id));
        let (modality, tie_broken) = select_modality(&a.scores, rule, &mut rng);
        let docs: Vec<Document> = a.docs(modality).iter().map(|r| r.document.clone()).collect();
        if docs.is_empty() {
            out.skips.push(SkipRecord {
                id: qa.id.clone(),
                stage: Some(Stage::Retrieve),
                reason: format!("no {modality} documents retrieved"),
            });
            continue;
        }
        out.examples.push(DanceExample {
            id: qa.id.clone(),
            question: qa.question.clone(),
            image_path: qa.image_path.clone(),
            modality,
            docs,
            answer: qa.golds[0].clone(),
            tie_broken,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub id: String,
    pub question: String,
    pub docs: Vec<Document>,
    pub gold_doc_ids: Vec<String>,
}

/// Pads each pair's one or two gold documents with uniformly drawn non-gold
/// documents from `kbs` until it has [`NOISE_SET_SIZE`], then shuffles.
pub fn build_noise_set(qaset: &[QAPair], kbs: &[&KnowledgeBase], seed: u64) -> Result<Vec<NoiseRecord>> {
    let pool: Vec<&Document> = kbs.iter().flat_map(|kb| kb.documents()).collect();
    let distinct_ids = pool.iter().map(|d| d.id.as_str()).collect::<HashSet<_>>().len();
    let find = |id: &str| pool.iter().copied().find(|d| d.id == id);
    qaset
        .iter()
        .map(|qa| {
            let golds: Vec<String> = qa.gold_doc_ids.as_ref().map(|g| g.all().cloned().collect()).unwrap_or_default();
            let unique: HashSet<&str> = golds.iter().map(String::as_str).collect();
            if golds.is_empty() || golds.len() > 2 || unique.len() != golds.len() {
                return Err(Error::Invalid(format!(
                    "QA pair {:?} has {} gold documents; noise sets need 1 or 2 distinct ones",
                    qa.id,
                    golds.len()
                )));
            }
            let mut docs = golds
                .iter()
                .map(|id| {
                    find(id).cloned().ok_or_else(|| {
                        Error::Invalid(format!("gold document {id:?} of QA pair {:?} is not in the knowledge base", qa.id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let fillers = NOISE_SET_SIZE - golds.len();
            if distinct_ids - golds.len() < fillers {
                return Err(Error::Invalid(format!(
                    "knowledge base has {} non-gold documents, QA pair {:?} needs {fillers}",
                    distinct_ids - golds.len(),
                    qa.id
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, &qa.id));
            let mut taken: HashSet<&str> = unique;
            while docs.len() < NOISE_SET_SIZE {
                let d = pool[rng.random_range(0..pool.len())];
                if taken.insert(d.id.as_str()) {
                    docs.push(d.clone());
                }
            }
            docs.shuffle(&mut rng);
            Ok(NoiseRecord {
                id: qa.id.clone(),
                question: qa.question.clone(),
                docs,
                gold_doc_ids: golds,
            })
        })
        .collect()
}
