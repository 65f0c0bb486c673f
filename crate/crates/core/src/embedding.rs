//! Unit-norm embeddings for queries and documents.
//!
//! Two backends sit behind [`Embedder`]:
//!
//! - `hash`: signed feature hashing of character 3-grams, deterministic in
//!   `(seed, text)` and dependency-free. Used for fixtures and offline runs.
//! - `remote`: a batch embedding service speaking
//!   `POST {"model", "inputs": [{"text", "image_path"}]}` and answering
//!   `{"vectors": [[...], ...]}`.
//!
//! Every vector leaving this module is L2-normalized, so cosine similarity is a
//! plain dot product.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::hashing::{bucket_and_sign, hash64};
use crate::http::JsonClient;
use crate::kb_store::Document;
use crate::{Error, Result};

pub const DEFAULT_HASH_DIM: usize = 256;

const START: char = '\u{2}';
const END: char = '\u{3}';

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(raw: &[f64]) -> Result<EmbeddingVector> {
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embedding vector"));
    }
    let n = norm(raw);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector {
        values: raw.iter().map(|x| x / n).collect(),
    })
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderBackend {
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub backend: EmbedderBackend,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_dim() -> usize {
    DEFAULT_HASH_DIM
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_batch() -> usize {
    64
}
fn default_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    2
}

impl EmbedderConfig {
    pub fn hash(dim: usize, seed: u64) -> Self {
        EmbedderConfig {
            backend: EmbedderBackend::Hash,
            dim,
            endpoint: None,
            model_name: None,
            seed: Some(seed),
            timeout_ms: default_timeout_ms(),
            max_batch: default_max_batch(),
            max_in_flight: default_in_flight(),
            max_retries: default_retries(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_name: impl Into<String>, dim: usize) -> Self {
        EmbedderConfig {
            backend: EmbedderBackend::Remote,
            endpoint: Some(endpoint.into()),
            model_name: Some(model_name.into()),
            seed: None,
            ..EmbedderConfig::hash(dim, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedder dim must be positive".into()));
        }
        if self.max_batch == 0 || self.max_in_flight == 0 {
            return Err(Error::Config("embedder max_batch and max_in_flight must be positive".into()));
        }
        match self.backend {
            EmbedderBackend::Hash if self.seed.is_none() => {
                Err(Error::Config("hash embedder requires a seed".into()))
            }
            EmbedderBackend::Remote if self.endpoint.is_none() => {
                Err(Error::Config("remote embedder requires an endpoint".into()))
            }
            _ => Ok(()),
        }
    }

    /// Identifies the vector space. Indexes built under one fingerprint must
    /// only be queried with vectors of the same fingerprint.
    pub fn fingerprint(&self) -> String {
        match self.backend {
            EmbedderBackend::Hash => format!(
                "hash-char3:dim={}:seed={}",
                self.dim,
                self.seed.unwrap_or_default()
            ),
            EmbedderBackend::Remote => format!(
                "remote:model={}:dim={}",
                self.model_name.as_deref().unwrap_or(""),
                self.dim
            ),
        }
    }
}

/// One item sent to the embedder: text, plus an image reference when there is one.
#[derive(Debug, Clone, Copy)]
pub struct EmbedInput<'a> {
    pub text: &'a str,
    pub image_path: Option<&'a str>,
}

impl<'a> From<&'a Document> for EmbedInput<'a> {
    fn from(doc: &'a Document) -> Self {
        EmbedInput {
            text: &doc.text,
            image_path: doc.image_path.as_deref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedder {
    cfg: EmbedderConfig,
    client: Option<JsonClient>,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let client = match cfg.backend {
            EmbedderBackend::Hash => None,
            EmbedderBackend::Remote => Some(JsonClient::new(
                Duration::from_millis(cfg.timeout_ms),
                cfg.max_retries,
            )),
        };
        Ok(Embedder { cfg, client })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn fingerprint(&self) -> String {
        self.cfg.fingerprint()
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.embed_query(text, None)
    }

    /// Embeds a query. The image reference only reaches remote backends; the
    /// hash backend embeds the text alone.
    pub fn embed_query(&self, text: &str, image_path: Option<&str>) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[EmbedInput { text, image_path }])?;
        Ok(out.remove(0))
    }

    pub fn embed_document(&self, doc: &Document) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[EmbedInput::from(doc)])?;
        Ok(out.remove(0))
    }

    /// Embeds many documents, splitting remote calls into batches of
    /// `max_batch` with at most `max_in_flight` requests outstanding. Output
    /// order matches input order.
    pub fn embed_documents(&self, docs: &[Document]) -> Result<Vec<EmbeddingVector>> {
        let inputs: Vec<EmbedInput<'_>> = docs.iter().map(EmbedInput::from).collect();
        match self.cfg.backend {
            EmbedderBackend::Hash => docs
                .iter()
                .map(|d| {
                    self.hash_embed(&d.text).map_err(|e| Error::EmbedDocument {
                        id: d.id.clone(),
                        source: Box::new(e),
                    })
                })
                .collect(),
            EmbedderBackend::Remote => {
                let batches: Vec<&[EmbedInput<'_>]> = inputs.chunks(self.cfg.max_batch).collect();
                let mut out = Vec::with_capacity(docs.len());
                for (wave_idx, wave) in batches.chunks(self.cfg.max_in_flight).enumerate() {
                    let results: Vec<Result<Vec<EmbeddingVector>>> = thread::scope(|s| {
                        let handles: Vec<_> = wave
                            .iter()
                            .map(|batch| s.spawn(move || self.remote_embed(batch)))
                            .collect();
                        handles
                            .into_iter()
                            .map(|h| h.join().expect("embedding worker panicked"))
                            .collect()
                    });
                    for (i, r) in results.into_iter().enumerate() {
                        let first = (wave_idx * self.cfg.max_in_flight + i) * self.cfg.max_batch;
                        out.extend(r.map_err(|e| Error::EmbedDocument {
                            id: docs[first].id.clone(),
                            source: Box::new(e),
                        })?);
                    }
                }
                Ok(out)
            }
        }
    }

    fn embed_batch(&self, inputs: &[EmbedInput<'_>]) -> Result<Vec<EmbeddingVector>> {
        if inputs.iter().any(|i| i.text.is_empty()) {
            return Err(Error::EmptyInput("text to embed"));
        }
        match self.cfg.backend {
            EmbedderBackend::Hash => inputs.iter().map(|i| self.hash_embed(i.text)).collect(),
            EmbedderBackend::Remote => self.remote_embed(inputs),
        }
    }

    fn hash_embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::EmptyInput("text to embed"));
        }
        let raw = hash_char_trigrams(text, self.cfg.dim, self.cfg.seed.unwrap_or_default());
        l2_normalize(&raw)
    }

    fn remote_embed(&self, inputs: &[EmbedInput<'_>]) -> Result<Vec<EmbeddingVector>> {
        let client = self.client.as_ref().expect("remote backend has a client");
        let endpoint = self.cfg.endpoint.as_deref().expect("validated");
        let body = json!({
            "model": self.cfg.model_name,
            "inputs": inputs
                .iter()
                .map(|i| json!({"text": i.text, "image_path": i.image_path}))
                .collect::<Vec<_>>(),
        });
        let resp: RemoteEmbedResponse = serde_json::from_value(client.post(endpoint, &body)?)
            .map_err(|e| Error::MalformedResponse(e.to_string()))?;
        if resp.vectors.len() != inputs.len() {
            return Err(Error::MalformedResponse(format!(
                "expected {} vectors, got {}",
                inputs.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors
            .iter()
            .map(|v| {
                if v.len() != self.cfg.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.cfg.dim,
                        found: v.len(),
                    });
                }
                l2_normalize(v)
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct RemoteEmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Raw (unnormalized) signed counts of lowercase character 3-grams, with
/// boundary markers so texts shorter than three characters still produce grams.
fn hash_char_trigrams(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let chars: Vec<char> = std::iter::once(START)
        .chain(text.chars().flat_map(char::to_lowercase))
        .chain(std::iter::once(END))
        .collect();
    let mut out = vec![0.0; dim];
    let mut buf = [0u8; 12];
    for window in chars.windows(3) {
        let mut len = 0;
        for c in window {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        let (bucket, sign) = bucket_and_sign(hash64(seed, &buf[..len]), dim);
        out[bucket] += sign;
    }
    out
}

/// Convenience wrapper for one-off calls.
pub fn embed_text(cfg: &EmbedderConfig, text: &str) -> Result<EmbeddingVector> {
    Embedder::new(cfg.clone())?.embed_text(text)
}

pub fn embed_document(cfg: &EmbedderConfig, doc: &Document) -> Result<EmbeddingVector> {
    Embedder::new(cfg.clone())?.embed_document(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::testing::serve;
    use proptest::prelude::*;

    fn hash_cfg() -> EmbedderConfig {
        EmbedderConfig::hash(DEFAULT_HASH_DIM, 7)
    }

    #[test]
    fn normalize_three_four_five() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((v.as_slice()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent_on_unit_vectors() {
        let v = l2_normalize(&[0.6, 0.8]).unwrap();
        let w = l2_normalize(v.as_slice()).unwrap();
        for (a, b) in v.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(l2_normalize(&[f64::NAN, 1.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cosine_fixed_cases() {
        let x = l2_normalize(&[1.0, 0.0]).unwrap();
        let y = l2_normalize(&[0.0, 1.0]).unwrap();
        let nx = l2_normalize(&[-1.0, 0.0]).unwrap();
        assert_eq!(cosine_sim(&x, &x).unwrap(), 1.0);
        assert_eq!(cosine_sim(&x, &y).unwrap(), 0.0);
        assert_eq!(cosine_sim(&x, &nx).unwrap(), -1.0);
        let z = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(cosine_sim(&x, &z), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn hash_embedding_is_deterministic_and_unit() {
        let cfg = hash_cfg();
        let a = embed_text(&cfg, "the golden gate bridge").unwrap();
        let b = embed_text(&cfg, "the golden gate bridge").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), DEFAULT_HASH_DIM);
        assert!((a.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn short_texts_differ() {
        let cfg = hash_cfg();
        let a = embed_text(&cfg, "aa").unwrap();
        let b = embed_text(&cfg, "ab").unwrap();
        assert_ne!(a, b);
        assert!(cosine_sim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn similar_text_similar_vector() {
        let cfg = hash_cfg();
        let a = embed_text(&cfg, "golden gate bridge in fog").unwrap();
        let b = embed_text(&cfg, "golden gate bridge at night").unwrap();
        let c = embed_text(&cfg, "quantum chromodynamics lecture").unwrap();
        assert!(cosine_sim(&a, &b).unwrap() > cosine_sim(&a, &c).unwrap());
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(embed_text(&hash_cfg(), ""), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn documents_embed_their_text() {
        let cfg = hash_cfg();
        let t = Document::textual("t", "a passage about boats");
        assert_eq!(embed_document(&cfg, &t).unwrap(), embed_text(&cfg, &t.text).unwrap());
        let v = Document::visual("v", "red car", "img/car.jpg");
        assert_eq!(embed_document(&cfg, &v).unwrap(), embed_text(&cfg, "red car").unwrap());
    }

    #[test]
    fn config_validation() {
        let mut cfg = hash_cfg();
        cfg.seed = None;
        assert!(matches!(Embedder::new(cfg), Err(Error::Config(_))));
        let mut cfg = EmbedderConfig::remote("http://x", "m", 4);
        cfg.endpoint = None;
        assert!(matches!(Embedder::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn remote_unreachable_is_transport_error() {
        // Bind then drop a listener to get a port nobody is serving.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = EmbedderConfig::remote(format!("http://127.0.0.1:{port}/embed"), "m", 2);
        cfg.max_retries = 0;
        let e = Embedder::new(cfg).unwrap().embed_text("hello").unwrap_err();
        assert!(matches!(e, Error::Transport(_)), "{e:?}");
    }

    #[test]
    fn remote_round_trip_normalizes_and_sends_image_paths() {
        let served = serve(vec![(200, r#"{"vectors":[[3.0,4.0],[0.0,2.0]]}"#.into())]);
        let mut cfg = EmbedderConfig::remote(&served.url, "vbge", 2);
        cfg.max_retries = 0;
        let embedder = Embedder::new(cfg).unwrap();
        let docs = [
            Document::visual("v", "red car", "img/car.jpg"),
            Document::textual("t", "text"),
        ];
        let out = embedder.embed_documents(&docs).unwrap();
        assert_eq!(out[0].as_slice(), &[0.6, 0.8]);
        assert_eq!(out[1].as_slice(), &[0.0, 1.0]);
        let sent: serde_json::Value =
            serde_json::from_str(&served.requests.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "vbge");
        assert_eq!(sent["inputs"][0]["image_path"], "img/car.jpg");
        assert_eq!(sent["inputs"][1]["image_path"], serde_json::Value::Null);
    }

    #[test]
    fn remote_dimension_mismatch() {
        let served = serve(vec![(200, r#"{"vectors":[[1.0,0.0,0.0]]}"#.into())]);
        let mut cfg = EmbedderConfig::remote(&served.url, "m", 2);
        cfg.max_retries = 0;
        let e = Embedder::new(cfg).unwrap().embed_text("q").unwrap_err();
        assert!(matches!(e, Error::DimensionMismatch { expected: 2, found: 3 }));
    }

    #[test]
    fn remote_batches_preserve_order() {
        let responses = (0..3)
            .map(|i| (200, format!(r#"{{"vectors":[[1.0,{i}.0]]}}"#)))
            .collect();
        let served = serve(responses);
        let mut cfg = EmbedderConfig::remote(&served.url, "m", 2);
        cfg.max_batch = 1;
        cfg.max_in_flight = 1;
        let docs: Vec<Document> = (0..3).map(|i| Document::textual(format!("d{i}"), "x")).collect();
        let out = Embedder::new(cfg).unwrap().embed_documents(&docs).unwrap();
        let second: Vec<f64> = out.iter().map(|v| v.as_slice()[1]).collect();
        assert_eq!(second[0], 0.0);
        assert!(second[1] < second[2]);
    }

    fn arb_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 8).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in arb_vec(), b in arb_vec()) {
            let a = l2_normalize(&a).unwrap();
            let b = l2_normalize(&b).unwrap();
            prop_assert_eq!(cosine_sim(&a, &b).unwrap(), cosine_sim(&b, &a).unwrap());
        }

        #[test]
        fn normalization_is_scale_invariant(v in arb_vec(), alpha in 1e-3f64..1e3) {
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let c = cosine_sim(&l2_normalize(&scaled).unwrap(), &l2_normalize(&v).unwrap()).unwrap();
            prop_assert!((c - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn hash_output_is_unit(text in "\\PC{1,40}") {
            // Exact sign cancellation can zero out very short texts.
            match embed_text(&hash_cfg(), &text) {
                Ok(v) => prop_assert!((v.norm() - 1.0).abs() <= 1e-6),
                Err(e) => prop_assert!(matches!(e, Error::ZeroVector), "{e:?}"),
            }
        }
    }
}
