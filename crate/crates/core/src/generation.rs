//! Prompt rendering and answer generation.
//!
//! Four prompt templates cover two answer styles (a full sentence, or a single
//! word or phrase) with and without retrieved context. Generators implement
//! [`Generator`]; two ship here:
//!
//! - [`RemoteGenerator`] POSTs an OpenAI-style chat-completion request.
//! - [`MockGenerator`] is a deterministic stand-in used by offline tests. It
//!   answers a question correctly only when the question's gold document is in
//!   the rendered context, or, without context, when the question is marked as
//!   answerable from parametric knowledge.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::http::JsonClient;
use crate::kb_store::{Document, Modality};
use crate::{Error, Result};

const WITH_CONTEXT_SENTENCE: &str = "You are a helpful question answerer who can provide an answer given a question and relevant context.

Question: [Question]
Context: [Context]
Provide a single sentence that answers the question based on the given context.

Answer:";

const NO_CONTEXT_SENTENCE: &str = "You are a helpful question answerer who can provide an answer given a question.

Question: [Question]
Provide a single sentence that answers the question.

Answer:";

const WITH_CONTEXT_SHORT: &str = "You are a helpful question answerer who can provide an answer given a question and relevant context.

Question: [Question]
Context: [Context]
Provide a single word or phrase that answers the question based on the given context.

Answer:";

const NO_CONTEXT_SHORT: &str = "You are a helpful question answerer who can provide an answer given a question.

Question: [Question]
Provide a single word or phrase that answers the question.

Answer:";

const QUESTION_SLOT: &str = "[Question]";
const CONTEXT_SLOT: &str = "[Context]";

/// What the answer should look like.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerStyle {
    /// One sentence (used for WebQA-style data).
    #[serde(rename = "sentence-answer")]
    Sentence,
    /// A single word or phrase (used for MultimodalQA-style data).
    #[serde(rename = "short-answer")]
    Short,
}

impl std::str::FromStr for AnswerStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence-answer" | "sentence" => Ok(AnswerStyle::Sentence),
            "short-answer" | "short" => Ok(AnswerStyle::Short),
            _ => Err(Error::Invalid(format!("unknown answer style {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptStyle {
    pub answer: AnswerStyle,
    pub with_context: bool,
}

impl PromptStyle {
    pub fn template(self) -> &'static str {
        match (self.answer, self.with_context) {
            (AnswerStyle::Sentence, true) => WITH_CONTEXT_SENTENCE,
            (AnswerStyle::Sentence, false) => NO_CONTEXT_SENTENCE,
            (AnswerStyle::Short, true) => WITH_CONTEXT_SHORT,
            (AnswerStyle::Short, false) => NO_CONTEXT_SHORT,
        }
    }
}

/// Renders the context block: one entry per document, in the given order,
/// separated by blank lines.
pub fn render_context(docs: &[Document]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| match (d.modality, d.image_path.as_deref()) {
            (Modality::Visual, Some(path)) => {
                format!("Doc {} ({}): Image: {}\n{}", i + 1, d.id, path, d.text)
            }
            _ => format!("Doc {} ({}): {}", i + 1, d.id, d.text),
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Fills the template for `style`. The question and context are spliced in at
/// fixed positions, so placeholder-like text inside either is left alone.
pub fn render_prompt(question: &str, docs: Option<&[Document]>, style: PromptStyle) -> Result<String> {
    if question.is_empty() {
        return Err(Error::EmptyInput("question"));
    }
    let template = style.template();
    let (head, rest) = template.split_once(QUESTION_SLOT).expect("template has a question slot");
    match (style.with_context, docs) {
        (true, Some(docs)) if !docs.is_empty() => {
            let (mid, tail) = rest.split_once(CONTEXT_SLOT).expect("template has a context slot");
            Ok(format!("{head}{question}{mid}{}{tail}", render_context(docs)))
        }
        (true, _) => Err(Error::Invalid("context prompt requires at least one document".into())),
        (false, None) => Ok(format!("{head}{question}{rest}")),
        (false, Some(_)) => Err(Error::Invalid("documents given for a no-context prompt".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationResult {
    pub text: String,
    pub latency: Duration,
    pub token_count: Option<u64>,
    pub backend: String,
}

pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str, image_paths: &[String]) -> Result<GenerationResult>;
    fn backend_name(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorBackend {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub backend: GeneratorBackend,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub max_retries: u32,
    #[serde(default)]
    pub mock_seed: Option<u64>,
    /// Environment variable holding the bearer token, if any.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
}

fn default_max_tokens() -> u32 {
    128
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_api_key_env() -> String {
    "MRAG_API_KEY".to_string()
}

impl GeneratorConfig {
    pub fn mock(seed: u64) -> Self {
        GeneratorConfig {
            backend: GeneratorBackend::Mock,
            endpoint: None,
            model_name: None,
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout_ms: default_timeout_ms(),
            max_retries: 0,
            mock_seed: Some(seed),
            api_key_env: default_api_key_env(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        GeneratorConfig {
            backend: GeneratorBackend::Remote,
            endpoint: Some(endpoint.into()),
            model_name: Some(model_name.into()),
            mock_seed: None,
            ..GeneratorConfig::mock(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.backend {
            GeneratorBackend::Remote if self.endpoint.is_none() || self.model_name.is_none() => Err(
                Error::Config("remote generator requires endpoint and model_name".into()),
            ),
            GeneratorBackend::Mock if self.mock_seed.is_none() => {
                Err(Error::Config("mock generator requires mock_seed".into()))
            }
            _ => Ok(()),
        }
    }

    /// Builds the configured generator. `fixtures` only matter for the mock.
    pub fn build(&self, fixtures: MockFixtures) -> Result<Box<dyn Generator>> {
        self.validate()?;
        Ok(match self.backend {
            GeneratorBackend::Remote => Box::new(RemoteGenerator::new(self.clone())?),
            GeneratorBackend::Mock => Box::new(MockGenerator::new(self.mock_seed.unwrap_or_default(), fixtures)),
        })
    }
}

pub struct RemoteGenerator {
    cfg: GeneratorConfig,
    client: JsonClient,
}

impl RemoteGenerator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut client = JsonClient::new(Duration::from_millis(cfg.timeout_ms), cfg.max_retries);
        if let Ok(token) = std::env::var(&cfg.api_key_env) {
            client = client.with_header("authorization", format!("Bearer {token}"));
        }
        Ok(RemoteGenerator { cfg, client })
    }

    fn request_body(&self, prompt: &str, image_paths: &[String]) -> Value {
        let content = if image_paths.is_empty() {
            json!(prompt)
        } else {
            let mut parts = vec![json!({"type": "text", "text": prompt})];
            parts.extend(
                image_paths
                    .iter()
                    .map(|p| json!({"type": "image_url", "image_url": {"url": p}})),
            );
            Value::Array(parts)
        };
        json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": content}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        })
    }
}

fn parse_completion(v: &Value) -> Result<(String, Option<u64>)> {
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| Error::MalformedResponse("no choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .concat(),
        other => {
            return Err(Error::MalformedResponse(format!(
                "unexpected content type: {other}"
            )))
        }
    };
    let tokens = v.pointer("/usage/completion_tokens").and_then(Value::as_u64);
    Ok((text, tokens))
}

impl Generator for RemoteGenerator {
    fn generate(&self, prompt: &str, image_paths: &[String]) -> Result<GenerationResult> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt"));
        }
        let started = Instant::now();
        let body = self.request_body(prompt, image_paths);
        let resp = self.client.post(self.cfg.endpoint.as_deref().unwrap_or_default(), &body)?;
        let (text, token_count) = parse_completion(&resp)?;
        Ok(GenerationResult {
            text,
            latency: started.elapsed(),
            token_count,
            backend: "remote".into(),
        })
    }

    fn backend_name(&self) -> &str {
        "remote"
    }
}

/// The planted answer for one question: the mock answers `answer` when any of
/// `doc_ids` is in context, or with no context when `parametric` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockFixture {
    pub doc_ids: Vec<String>,
    pub answer: String,
    pub parametric: bool,
}

impl MockFixture {
    /// Inline form recognized inside prompts: `GOLD[<doc_id>]=<answer>`.
    pub fn marker(doc_id: &str, answer: &str) -> String {
        format!("GOLD[{doc_id}]={answer}")
    }
}

/// Fixtures keyed by question text.
pub type MockFixtures = HashMap<String, MockFixture>;

pub const MOCK_UNKNOWN: &str = "unknown";

pub struct MockGenerator {
    seed: u64,
    fixtures: MockFixtures,
}

/// The pieces of a rendered prompt the mock needs.
struct ParsedPrompt<'a> {
    question: &'a str,
    context_ids: Option<Vec<&'a str>>,
}

fn parse_prompt(prompt: &str) -> ParsedPrompt<'_> {
    let start = prompt.find("\nQuestion: ").map(|i| i + "\nQuestion: ".len());
    let Some(start) = start else {
        return ParsedPrompt {
            question: prompt,
            context_ids: None,
        };
    };
    let rest = &prompt[start..];
    if let Some(ctx_at) = rest.find("\nContext: ") {
        let question = &rest[..ctx_at];
        let ctx = &rest[ctx_at + "\nContext: ".len()..];
        let ctx = ctx.rfind("\nProvide a single").map_or(ctx, |end| &ctx[..end]);
        ParsedPrompt {
            question,
            context_ids: Some(context_doc_ids(ctx)),
        }
    } else {
        let end = rest.rfind("\nProvide a single").unwrap_or(rest.len());
        ParsedPrompt {
            question: &rest[..end],
            context_ids: None,
        }
    }
}

/// Ids from `Doc <n> (<id>): ` entry headers.
fn context_doc_ids(ctx: &str) -> Vec<&str> {
    ctx.split("\n\n")
        .filter_map(|entry| {
            let rest = entry.strip_prefix("Doc ")?;
            let (n, rest) = rest.split_once(" (")?;
            n.parse::<usize>().ok()?;
            let (id, _) = rest.split_once("): ")?;
            Some(id)
        })
        .collect()
}

fn inline_marker(question: &str) -> Option<MockFixture> {
    let at = question.find("GOLD[")?;
    let rest = &question[at + "GOLD[".len()..];
    let (id, rest) = rest.split_once("]=")?;
    let answer = rest.lines().next().unwrap_or("").trim();
    Some(MockFixture {
        doc_ids: vec![id.to_string()],
        answer: answer.to_string(),
        parametric: false,
    })
}

impl MockGenerator {
    pub fn new(seed: u64, fixtures: MockFixtures) -> Self {
        MockGenerator { seed, fixtures }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The mock's answer for a rendered prompt.
    pub fn answer_for(&self, prompt: &str) -> String {
        let parsed = parse_prompt(prompt);
        let fixture = inline_marker(parsed.question).or_else(|| self.fixtures.get(parsed.question).cloned());
        let Some(fixture) = fixture else {
            return MOCK_UNKNOWN.to_string();
        };
        let correct = match &parsed.context_ids {
            Some(ids) => fixture.doc_ids.iter().any(|g| ids.contains(&g.as_str())),
            None => fixture.parametric,
        };
        if correct {
            fixture.answer
        } else {
            MOCK_UNKNOWN.to_string()
        }
    }
}

impl Generator for MockGenerator {
    fn generate(&self, prompt: &str, _image_paths: &[String]) -> Result<GenerationResult> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt"));
        }
        let started = Instant::now();
        let text = self.answer_for(prompt);
        Ok(GenerationResult {
            token_count: Some(text.split_whitespace().count() as u64),
            text,
            latency: started.elapsed(),
            backend: "mock".into(),
        })
    }

    fn backend_name(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::testing::serve;

    const SHORT_CTX: PromptStyle = PromptStyle {
        answer: AnswerStyle::Short,
        with_context: true,
    };
    const SENTENCE_PLAIN: PromptStyle = PromptStyle {
        answer: AnswerStyle::Sentence,
        with_context: false,
    };

    #[test]
    fn renders_no_context_sentence_prompt() {
        let p = render_prompt("Q?", None, SENTENCE_PLAIN).unwrap();
        assert_eq!(
            p,
            "You are a helpful question answerer who can provide an answer given a question.\n\nQuestion: Q?\nProvide a single sentence that answers the question.\n\nAnswer:"
        );
    }

    #[test]
    fn renders_context_short_prompt() {
        let docs = [Document::textual("t9", "Paris is the capital.")];
        let p = render_prompt("Q?", Some(&docs), SHORT_CTX).unwrap();
        assert!(p.contains("\nContext: Doc 1 (t9): Paris is the capital.\nProvide a single word or phrase that answers the question based on the given context.\n"));
    }

    #[test]
    fn visual_docs_include_image_reference() {
        let docs = [
            Document::visual("v1", "a red car", "img/v1.jpg"),
            Document::textual("t1", "cars are fast"),
        ];
        assert_eq!(
            render_context(&docs),
            "Doc 1 (v1): Image: img/v1.jpg\na red car\n\nDoc 2 (t1): cars are fast"
        );
    }

    #[test]
    fn context_preconditions() {
        assert!(render_prompt("Q?", Some(&[]), SHORT_CTX).is_err());
        assert!(render_prompt("Q?", None, SHORT_CTX).is_err());
        assert!(render_prompt("", None, SENTENCE_PLAIN).is_err());
        let docs = [Document::textual("t", "x")];
        assert!(render_prompt("Q?", Some(&docs), SENTENCE_PLAIN).is_err());
    }

    #[test]
    fn placeholders_in_question_are_not_expanded() {
        let docs = [Document::textual("t", "ctx")];
        let p = render_prompt("what is [Context]?", Some(&docs), SHORT_CTX).unwrap();
        assert!(p.contains("Question: what is [Context]?\nContext: Doc 1"));
    }

    #[test]
    fn mock_inline_marker_rules() {
        let mock = MockGenerator::new(1, MockFixtures::new());
        let q = "Who designed it? GOLD[a17]=Brunel";
        let hit = render_prompt(q, Some(&[Document::textual("a17", "Brunel designed it")]), SHORT_CTX).unwrap();
        assert_eq!(mock.generate(&hit, &[]).unwrap().text, "Brunel");
        let miss = render_prompt(q, Some(&[Document::textual("b2", "irrelevant")]), SHORT_CTX).unwrap();
        assert_eq!(mock.generate(&miss, &[]).unwrap().text, MOCK_UNKNOWN);
        let plain = render_prompt(q, None, SENTENCE_PLAIN).unwrap();
        assert_eq!(mock.answer_for(&plain), MOCK_UNKNOWN);
    }

    #[test]
    fn mock_fixture_table_rules() {
        let mut fixtures = MockFixtures::new();
        fixtures.insert(
            "capital of France?".into(),
            MockFixture { doc_ids: vec!["t1".into()], answer: "Paris".into(), parametric: true },
        );
        let mock = MockGenerator::new(3, fixtures);
        let plain = render_prompt("capital of France?", None, SENTENCE_PLAIN).unwrap();
        assert_eq!(mock.answer_for(&plain), "Paris");
        let ctx = render_prompt("capital of France?", Some(&[Document::textual("t2", "x")]), SHORT_CTX).unwrap();
        assert_eq!(mock.answer_for(&ctx), MOCK_UNKNOWN);
        assert_eq!(mock.answer_for(&render_prompt("other?", None, SENTENCE_PLAIN).unwrap()), MOCK_UNKNOWN);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GeneratorConfig::mock(1);
        cfg.mock_seed = None;
        assert!(cfg.build(MockFixtures::new()).is_err());
        let mut cfg = GeneratorConfig::remote("http://x", "m");
        cfg.model_name = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn remote_success_and_request_shape() {
        let served = serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"Paris."}}],"usage":{"completion_tokens":2}}"#.into(),
        )]);
        let gen = RemoteGenerator::new(GeneratorConfig::remote(&served.url, "qwen2-vl")).unwrap();
        let out = gen.generate("Q", &["img/a.png".to_string()]).unwrap();
        assert_eq!(out.text, "Paris.");
        assert_eq!(out.token_count, Some(2));
        let sent: Value = serde_json::from_str(&served.requests.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "qwen2-vl");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["messages"][0]["content"][1]["image_url"]["url"], "img/a.png");
    }

    #[test]
    fn remote_http_500_carries_status_and_body() {
        let served = serve(vec![(500, "internal kaboom".into())]);
        let gen = RemoteGenerator::new(GeneratorConfig::remote(&served.url, "m")).unwrap();
        match gen.generate("Q", &[]) {
            Err(Error::HttpStatus { status, body }) => {
                assert_eq!(status, 500);
                assert!(body.contains("kaboom"));
            }
            other => panic!("expected status error, got {other:?}"),
        }
    }

    #[test]
    fn remote_malformed_response() {
        let served = serve(vec![(200, r#"{"choices":[]}"#.into())]);
        let gen = RemoteGenerator::new(GeneratorConfig::remote(&served.url, "m")).unwrap();
        assert!(matches!(gen.generate("Q", &[]), Err(Error::MalformedResponse(_))));
    }

    #[test]
    fn remote_timeout() {
        // Accept the connection but never answer.
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let _hold = std::thread::spawn(move || {
            let conn = listener.accept();
            std::thread::sleep(Duration::from_secs(3));
            drop(conn);
        });
        let mut cfg = GeneratorConfig::remote(url, "m");
        cfg.timeout_ms = 200;
        let gen = RemoteGenerator::new(cfg).unwrap();
        assert!(matches!(gen.generate("Q", &[]), Err(Error::Timeout(_))));
    }
}
