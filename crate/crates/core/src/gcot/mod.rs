//! Grounded chain-of-thought (GCoT) responses for VQA records.
//!
//! The LLM is asked for three numbered steps (describe the image, locate
//! the question object, reason if needed). The steps are joined and closed
//! with `So the answer is {answer}.`

mod prompt;
mod reply;
mod spatial;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{AuditEntry, AuditLog, LlmClient, LlmError, ResponseCache};

pub use prompt::{build_prompt, PromptTemplate, PromptText, SECTION_SEPARATOR};
pub use reply::{final_sentence, finalize_response, parse_gcot_reply, render_steps};
pub use spatial::{
    horizontal_relation, resolve_spatial_relation, resolve_spatial_relation_with, vertical_relation,
    SpatialRelation, VerticalConvention,
};

#[derive(Debug, Error)]
pub enum GcotError {
    #[error("template: {0}")]
    Template(String),
    #[error("reply did not parse: {0}")]
    Parse(String),
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("gave up after {attempts} attempts; last error: {last}")]
    ExhaustedRetries { attempts: usize, last: String },
}

/// Axis-aligned box as `[x1, y1, x2, y2]` (top-left, bottom-right).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn within_unit_square(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub image_id: String,
    #[serde(default)]
    pub captions: Vec<String>,
    #[serde(default)]
    pub objects: Vec<LabeledBox>,
    pub question: String,
    pub answer: String,
}

impl VqaRecord {
    pub fn validate(&self) -> Result<(), GcotError> {
        let invalid = |reason: String| GcotError::InvalidRecord {
            id: self.image_id.clone(),
            reason,
        };
        if self.captions.is_empty() && self.objects.is_empty() {
            return Err(invalid("needs at least one caption or object".into()));
        }
        if self.answer.trim().is_empty() {
            return Err(invalid("empty answer".into()));
        }
        if let Some(o) = self.objects.iter().find(|o| !o.bbox.is_valid()) {
            return Err(invalid(format!("degenerate box for {:?}: {}", o.label, o.bbox.render())));
        }
        Ok(())
    }
}

/// The three reasoning steps and the closing sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GCoTResponse {
    pub step_describe: String,
    pub step_locate: String,
    /// Empty when the question needs no reasoning.
    pub step_reason: String,
    pub final_sentence: String,
}

impl GCoTResponse {
    pub fn with_answer(mut self, answer: &str) -> Self {
        self.final_sentence = final_sentence(answer);
        self
    }

    /// The complete response text: steps, then the closing sentence.
    pub fn text(&self) -> String {
        [&self.step_describe, &self.step_locate, &self.step_reason, &self.final_sentence]
            .into_iter()
            .filter(|s| !s.is_empty())
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Extra attempts after the first unparseable reply.
    pub max_retries: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2 }
    }
}

/// Shared state for a generation run.
pub struct Generator<'a> {
    pub template: &'a PromptTemplate,
    pub cache: Option<&'a ResponseCache>,
    pub audit: &'a AuditLog,
}

impl Generator<'_> {
    /// Prompts the client until a reply parses or the retry budget is spent.
    /// Only parseable replies are cached.
    pub fn generate(&self, r: &VqaRecord, client: &dyn LlmClient, policy: RetryPolicy) -> Result<GCoTResponse, GcotError> {
        let rendered = build_prompt(r, self.template)?;
        for w in &rendered.warnings {
            log::warn!("{w}");
        }
        let prompt = rendered.prompt;
        let hash = prompt.hash();

        if let Some(cached) = self.cache.and_then(|c| c.get(&hash, client.model())) {
            if let Ok(parsed) = parse_gcot_reply(&cached) {
                return Ok(parsed.with_answer(&r.answer));
            }
        }

        let attempts = policy.max_retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            let raw = client.complete(&prompt)?;
            let parsed = parse_gcot_reply(&raw);
            self.audit.record(AuditEntry {
                segment_or_image_id: r.image_id.clone(),
                prompt: prompt.flatten(),
                raw_reply: raw.clone(),
                parsed_ok: parsed.is_ok(),
            });
            match parsed {
                Ok(g) => {
                    if let Some(cache) = self.cache {
                        cache.insert(&hash, client.model(), raw);
                    }
                    return Ok(g.with_answer(&r.answer));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(GcotError::ExhaustedRetries { attempts, last })
    }

    /// Runs [`Self::generate`] over a batch with at most `max_concurrency`
    /// requests in flight. Results come back in input order.
    pub fn generate_all(
        &self,
        records: &[VqaRecord],
        client: &dyn LlmClient,
        policy: RetryPolicy,
        max_concurrency: usize,
    ) -> Vec<Result<GCoTResponse, GcotError>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(max_concurrency.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| {
            records
                .par_iter()
                .map(|r| self.generate(r, client, policy))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatPrompt;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<String>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl LlmClient for Scripted {
        fn model(&self) -> &str {
            "scripted"
        }
        fn complete(&self, _: &ChatPrompt) -> Result<String, LlmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut r = self.replies.lock().unwrap();
            if r.len() > 1 {
                Ok(r.pop().unwrap())
            } else {
                r.last().cloned().ok_or_else(|| LlmError::Unavailable("empty script".into()))
            }
        }
    }

    fn bear() -> VqaRecord {
        VqaRecord {
            image_id: "bear-1".into(),
            captions: vec!["A brown bear in a field.".into()],
            objects: vec![LabeledBox {
                label: "bear".into(),
                bbox: BoundingBox::new(0.1, 0.2, 0.6, 0.9),
            }],
            question: "What color is the bear?".into(),
            answer: "brown".into(),
        }
    }

    const GOOD: &str = "1. A bear stands in a field.\n2. The bear is at [0.1, 0.2, 0.6, 0.9].";

    #[test]
    fn garbage_exhausts_retries() {
        let template = PromptTemplate::default();
        let audit = AuditLog::new();
        let g = Generator { template: &template, cache: None, audit: &audit };
        let client = Scripted::new(&["nonsense"]);
        let err = g.generate(&bear(), &client, RetryPolicy { max_retries: 2 }).unwrap_err();
        assert!(matches!(err, GcotError::ExhaustedRetries { attempts: 3, .. }));
        assert_eq!(client.calls.load(Ordering::SeqCst), 3);
        assert_eq!(audit.len(), 3);
        assert!(audit.entries().iter().all(|e| !e.parsed_ok));
    }

    #[test]
    fn flaky_then_success_logs_both() {
        let template = PromptTemplate::default();
        let audit = AuditLog::new();
        let cache = ResponseCache::new();
        let g = Generator { template: &template, cache: Some(&cache), audit: &audit };
        let client = Scripted::new(&["garbage", GOOD]);
        let resp = g.generate(&bear(), &client, RetryPolicy { max_retries: 2 }).unwrap();
        assert_eq!(resp.final_sentence, "So the answer is brown.");
        assert_eq!(client.calls.load(Ordering::SeqCst), 2);
        let log = audit.entries();
        assert_eq!(log.iter().map(|e| e.parsed_ok).collect::<Vec<_>>(), vec![false, true]);
        assert_eq!(cache.len(), 1);

        // second run is served from cache
        let again = g.generate(&bear(), &client, RetryPolicy::default()).unwrap();
        assert_eq!(again, resp);
        assert_eq!(client.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn unavailable_client_surfaces() {
        struct Down;
        impl LlmClient for Down {
            fn model(&self) -> &str {
                "down"
            }
            fn complete(&self, _: &ChatPrompt) -> Result<String, LlmError> {
                Err(LlmError::Unavailable("connection refused".into()))
            }
        }
        let template = PromptTemplate::default();
        let audit = AuditLog::new();
        let g = Generator { template: &template, cache: None, audit: &audit };
        assert!(matches!(g.generate(&bear(), &Down, RetryPolicy::default()), Err(GcotError::Llm(_))));
    }

    #[test]
    fn invalid_records() {
        let mut r = bear();
        r.answer = " ".into();
        assert!(r.validate().is_err());
        let mut r = bear();
        r.captions.clear();
        r.objects.clear();
        assert!(r.validate().is_err());
        let mut r = bear();
        r.objects[0].bbox = BoundingBox::new(0.5, 0.1, 0.5, 0.2);
        assert!(r.validate().is_err());
    }

    #[test]
    fn box_serializes_as_array() {
        let o = LabeledBox { label: "bird".into(), bbox: BoundingBox::new(0.095, 0.797, 0.355, 0.849) };
        let json = serde_json::to_string(&o).unwrap();
        assert_eq!(json, r#"{"label":"bird","box":[0.095,0.797,0.355,0.849]}"#);
        assert_eq!(serde_json::from_str::<LabeledBox>(&json).unwrap(), o);
    }
}
