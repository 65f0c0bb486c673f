//! Route, optionally retrieve, then generate, with per-stage timings.
//!
//! The query is embedded only after the router asks for retrieval, so a
//! no-retrieval decision costs one router call plus one generation.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::{QAPair, SkipRecord};
use crate::embedding::Embedder;
use crate::eval_metrics::{evaluate, Metric};
use crate::flat_retriever::{IndexedKb, Retrieved, ScoredDoc, DEFAULT_K};
use crate::generation::{render_prompt, AnswerStyle, Generator, PromptStyle};
use crate::kb_store::{Document, Modality};
use crate::router::{Decision, RouterModel};
use crate::{Error, Result, Stage};

/// Where routing decisions come from.
#[derive(Debug, Clone)]
pub enum RouterSource {
    Model(Box<RouterModel>),
    /// Every query gets the same decision.
    Fixed(Decision),
    /// Decisions looked up by query id.
    Scripted(HashMap<String, Decision>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionSource {
    Router,
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    #[serde(default)]
    pub id: Option<String>,
    pub text: String,
    #[serde(default)]
    pub image_path: Option<String>,
}

impl From<&QAPair> for Query {
    fn from(qa: &QAPair) -> Self {
        Query {
            id: Some(qa.id.clone()),
            text: qa.question.clone(),
            image_path: qa.image_path.clone(),
        }
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub route_ms: f64,
    pub embed_ms: f64,
    pub retrieve_ms: f64,
    pub generate_ms: f64,
    pub total_ms: f64,
}

impl Timings {
    /// Query embedding plus index search.
    pub fn retrieval_ms(&self) -> f64 {
        self.embed_ms + self.retrieve_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDoc {
    #[serde(flatten)]
    pub scored: ScoredDoc,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub query_id: Option<String>,
    pub decision: Decision,
    pub decision_source: DecisionSource,
    /// Router probabilities, when a model made the decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<(Decision, f64)>>,
    pub retrieved: Vec<TraceDoc>,
    pub response: String,
    pub timings: Timings,
    pub retrieval_calls: u32,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub struct Pipeline<'a> {
    pub router: RouterSource,
    pub visual: &'a IndexedKb,
    pub textual: &'a IndexedKb,
    pub embedder: &'a Embedder,
    pub generator: &'a dyn Generator,
    pub answer_style: AnswerStyle,
    pub k: usize,
    pub metric: Metric,
    /// Upper bound on queries processed concurrently by the evaluators.
    pub max_in_flight: usize,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        router: RouterSource,
        visual: &'a IndexedKb,
        textual: &'a IndexedKb,
        embedder: &'a Embedder,
        generator: &'a dyn Generator,
    ) -> Result<Self> {
        let p = Pipeline {
            router,
            visual,
            textual,
            embedder,
            generator,
            answer_style: AnswerStyle::Sentence,
            k: DEFAULT_K,
            metric: Metric::F1,
            max_in_flight: 4,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
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

    fn index(&self, m: Modality) -> &IndexedKb {
        match m {
            Modality::Visual => self.visual,
            Modality::Textual => self.textual,
        }
    }

    pub fn answer(&self, query: &Query) -> Result<PipelineTrace> {
        self.answer_with(&self.router, query)
    }

    fn route(
        &self,
        router: &RouterSource,
        query: &Query,
    ) -> Result<(Decision, DecisionSource, Option<Vec<(Decision, f64)>>)> {
        match router {
            RouterSource::Model(m) => {
                let r = m.route(&query.text)?;
                Ok((r.decision, DecisionSource::Router, Some(r.probabilities)))
            }
            RouterSource::Fixed(d) => Ok((*d, DecisionSource::Override, None)),
            RouterSource::Scripted(map) => {
                let id = query
                    .id
                    .as_deref()
                    .ok_or_else(|| Error::Invalid("scripted routing needs query ids".into()))?;
                let d = map
                    .get(id)
                    .ok_or_else(|| Error::Invalid(format!("no scripted decision for query {id:?}")))?;
                Ok((*d, DecisionSource::Override, None))
            }
        }
    }

    fn answer_with(&self, router: &RouterSource, query: &Query) -> Result<PipelineTrace> {
        if query.text.trim().is_empty() {
            return Err(Error::EmptyInput("query text"));
        }
        let total = Instant::now();
        let mut timings = Timings::default();

        let t = Instant::now();
        let (decision, decision_source, probabilities) =
            self.route(router, query).map_err(|e| e.at(Stage::Route))?;
        timings.route_ms = ms_since(t);

        let mut hits: Vec<Retrieved> = Vec::new();
        let mut retrieval_calls = 0;
        if decision.retrieves() {
            let t = Instant::now();
            let q = self
                .embedder
                .embed_query(&query.text, query.image_path.as_deref())
                .map_err(|e| e.at(Stage::Embed))?;
            timings.embed_ms = ms_since(t);

            let t = Instant::now();
            for &m in decision.modalities() {
                hits.extend(self.index(m).retrieve(&q, self.k).map_err(|e| e.at(Stage::Retrieve))?);
            }
            retrieval_calls = 1;
            timings.retrieve_ms = ms_since(t);
        }

        let t = Instant::now();
        let docs: Vec<Document> = hits.iter().map(|r| r.document.clone()).collect();
        let style = PromptStyle {
            answer: self.answer_style,
            with_context: decision.retrieves(),
        };
        let prompt = render_prompt(&query.text, decision.retrieves().then_some(&docs[..]), style)
            .map_err(|e| e.at(Stage::Generate))?;
        let images: Vec<String> = query
            .image_path
            .iter()
            .chain(docs.iter().filter_map(|d| d.image_path.as_ref()))
            .cloned()
            .collect();
        let response = self
            .generator
            .generate(&prompt, &images)
            .map_err(|e| e.at(Stage::Generate))?
            .text;
        timings.generate_ms = ms_since(t);
        timings.total_ms = ms_since(total);

        Ok(PipelineTrace {
            query_id: query.id.clone(),
            decision,
            decision_source,
            probabilities,
            retrieved: hits
                .into_iter()
                .map(|r| TraceDoc {
                    modality: r.document.modality,
                    scored: r.scored,
                })
                .collect(),
            response,
            timings,
            retrieval_calls,
        })
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.max_in_flight)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    pub fn evaluate(&self, qaset: &[QAPair]) -> Result<EvalReport> {
        self.evaluate_with(&self.router, "router", qaset)
    }

    fn evaluate_with(&self, router: &RouterSource, strategy: &str, qaset: &[QAPair]) -> Result<EvalReport> {
        if qaset.is_empty() {
            return Err(Error::EmptyInput("QA set"));
        }
        self.validate()?;
        let results: Vec<Result<(PipelineTrace, f64)>> = self.pool()?.install(|| {
            qaset
                .par_iter()
                .map(|qa| {
                    let trace = self.answer_with(router, &Query::from(qa))?;
                    let s = evaluate(&trace.response, &qa.golds, self.metric).map_err(|e| e.at(Stage::Score))?;
                    Ok((trace, s.value))
                })
                .collect()
        });
        let mut scored = Vec::new();
        let mut skips = Vec::new();
        for (qa, r) in qaset.iter().zip(results) {
            match r {
                Ok(x) => scored.push(x),
                Err(e) => skips.push(SkipRecord {
                    id: qa.id.clone(),
                    stage: e.stage(),
                    reason: e.to_string(),
                }),
            }
        }
        Ok(EvalReport::aggregate(strategy, self.metric, scored, skips))
    }

    /// One report row per fixed strategy, then one for the configured router.
    pub fn compare_strategies(&self, qaset: &[QAPair], fixed: &[Decision]) -> Result<Vec<EvalReport>> {
        let mut rows = fixed
            .iter()
            .map(|&d| self.evaluate_with(&RouterSource::Fixed(d), d.as_str(), qaset))
            .collect::<Result<Vec<_>>>()?;
        rows.push(self.evaluate(qaset)?);
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanTimings {
    pub route_ms: f64,
    pub embed_ms: f64,
    pub retrieve_ms: f64,
    pub retrieval_ms: f64,
    pub generate_ms: f64,
    pub total_ms: f64,
}

impl MeanTimings {
    fn of<'t>(timings: impl Iterator<Item = &'t Timings>) -> Self {
        let mut m = MeanTimings::default();
        let mut n = 0usize;
        for t in timings {
            m.route_ms += t.route_ms;
            m.embed_ms += t.embed_ms;
            m.retrieve_ms += t.retrieve_ms;
            m.retrieval_ms += t.retrieval_ms();
            m.generate_ms += t.generate_ms;
            m.total_ms += t.total_ms;
            n += 1;
        }
        if n > 0 {
            let n = n as f64;
            for x in [
                &mut m.route_ms,
                &mut m.embed_ms,
                &mut m.retrieve_ms,
                &mut m.retrieval_ms,
                &mut m.generate_ms,
                &mut m.total_ms,
            ] {
                *x /= n;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub decision: Decision,
    pub count: usize,
    pub ratio: f64,
    /// `None` when no query was routed here.
    pub metric_mean: Option<f64>,
    pub mean_timings: MeanTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub metric: Metric,
    /// Queries that produced a trace.
    pub count: usize,
    pub overall: f64,
    pub decisions: Vec<DecisionRow>,
    pub mean_timings: MeanTimings,
    pub retrieval_calls: u64,
    pub skips: Vec<SkipRecord>,
    #[serde(skip)]
    pub traces: Vec<(PipelineTrace, f64)>,
}

impl EvalReport {
    fn aggregate(strategy: &str, metric: Metric, scored: Vec<(PipelineTrace, f64)>, skips: Vec<SkipRecord>) -> Self {
        let count = scored.len();
        let mean = |xs: &[f64]| if xs.is_empty() { None } else { Some(xs.iter().sum::<f64>() / xs.len() as f64) };
        let all: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
        let decisions = [Decision::Na, Decision::Visual, Decision::Textual, Decision::Hybrid]
            .into_iter()
            .filter_map(|d| {
                let routed: Vec<&(PipelineTrace, f64)> = scored.iter().filter(|(t, _)| t.decision == d).collect();
                if d == Decision::Hybrid && routed.is_empty() {
                    return None;
                }
                let scores: Vec<f64> = routed.iter().map(|(_, s)| *s).collect();
                Some(DecisionRow {
                    decision: d,
                    count: routed.len(),
                    ratio: if count == 0 { 0.0 } else { routed.len() as f64 / count as f64 },
                    metric_mean: mean(&scores),
                    mean_timings: MeanTimings::of(routed.iter().map(|(t, _)| &t.timings)),
                })
            })
            .collect();
        EvalReport {
            strategy: strategy.to_string(),
            metric,
            count,
            overall: mean(&all).unwrap_or(0.0),
            decisions,
            mean_timings: MeanTimings::of(scored.iter().map(|(t, _)| &t.timings)),
            retrieval_calls: scored.iter().map(|(t, _)| u64::from(t.retrieval_calls)).sum(),
            skips,
            traces: scored,
        }
    }

    pub fn ratio(&self, d: Decision) -> f64 {
        self.decisions.iter().find(|r| r.decision == d).map_or(0.0, |r| r.ratio)
    }
}
