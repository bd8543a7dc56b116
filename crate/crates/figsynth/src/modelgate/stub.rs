//! Deterministic stub endpoint.
//!
//! The stub is a first-class endpoint kind, not a test hack: whole-pipeline
//! runs select it via configuration and become reproducible end to end.
//! Responses come from an explicit fixture table keyed by request key, or
//! from deterministic generators derived from the request digest.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::templates::{RenderedPrompt, TemplateId};
use super::{GenerationRequest, TransportFailure};

/// Stub endpoint settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StubConfig {
    /// Exact responses by request key (see [`stub_request_key`]).
    #[serde(default)]
    pub fixtures: BTreeMap<String, String>,
    /// Fail this many attempts of every request before succeeding.
    #[serde(default)]
    pub fail_first_attempts: u32,
    /// Sleep per call, to make concurrency observable in tests.
    #[serde(default)]
    pub work_delay_ms: u64,
    /// Mixed into generated solver answers: numeric salts shift the answer
    /// by salt * 1_000_000, so distinct salts guarantee disagreement.
    #[serde(default)]
    pub answer_salt: String,
}

/// Concurrency instrumentation shared by all calls to one stub endpoint.
#[derive(Debug, Default)]
pub struct StubStats {
    pub calls: AtomicU64,
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl StubStats {
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

struct InFlightGuard<'a>(&'a StubStats);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.current.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Key identifying a request for fixture lookup: template name plus a
/// digest of the rendered user text, the attached image digest, and (at
/// nonzero temperature) the sample nonce.
pub fn stub_request_key(
    template_id: TemplateId,
    rendered_user: &str,
    image_digest_hex: Option<&str>,
    sample_nonce: u32,
    temperature: f64,
) -> String {
    let mut h = Sha256::new();
    h.update(rendered_user.as_bytes());
    h.update([0]);
    h.update(image_digest_hex.unwrap_or("").as_bytes());
    h.update([0]);
    if temperature > 0.0 {
        h.update(sample_nonce.to_be_bytes());
    }
    format!("{}:{}", template_id.name(), &hex::encode(h.finalize())[..16])
}

pub(super) struct StubTransport {
    config: StubConfig,
    stats: Arc<StubStats>,
    failures_served: Mutex<BTreeMap<String, u32>>,
}

impl StubTransport {
    pub fn new(config: StubConfig) -> StubTransport {
        StubTransport {
            config,
            stats: Arc::new(StubStats::default()),
            failures_served: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn stats(&self) -> Arc<StubStats> {
        Arc::clone(&self.stats)
    }

    pub fn send(
        &self,
        rendered: &RenderedPrompt,
        req: &GenerationRequest,
    ) -> Result<String, TransportFailure> {
        self.stats.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.stats.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.stats.peak.fetch_max(now, Ordering::SeqCst);
        let _guard = InFlightGuard(&self.stats);

        if self.config.work_delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(self.config.work_delay_ms));
        }

        let key = stub_request_key(
            req.template_id,
            &rendered.user,
            req.image.as_ref().map(|i| i.digest_hex.as_str()),
            req.sample_nonce,
            req.temperature,
        );

        if self.config.fail_first_attempts > 0 {
            let mut served = self.failures_served.lock().unwrap();
            let count = served.entry(key.clone()).or_insert(0);
            if *count < self.config.fail_first_attempts {
                *count += 1;
                return Err(TransportFailure {
                    retryable: true,
                    detail: format!("stub injected failure {count}"),
                });
            }
        }

        if let Some(fixture) = self.config.fixtures.get(&key) {
            return Ok(fixture.clone());
        }
        Ok(self.generate(rendered, req, &key))
    }

    /// Deterministic fallback response derived from the request key.
    fn generate(&self, rendered: &RenderedPrompt, req: &GenerationRequest, key: &str) -> String {
        let seed = Sha256::digest(key.as_bytes());
        let b = |i: usize| seed[i] as u32;
        match req.template_id {
            TemplateId::Img2Tikz => {
                format!(
                    "The image can be generated using the following TikZ code:\n```tikz\n\\begin{{tikzpicture}}\n\\draw (0,0) -- ({},{});\n\\draw ({},0) rectangle ({},{});\n\\node at ({},{}) {{{}}};\n\\end{{tikzpicture}}\n```",
                    1 + b(0) % 9,
                    1 + b(1) % 9,
                    1 + b(2) % 5,
                    2 + b(3) % 7,
                    1 + b(4) % 6,
                    b(5) % 4,
                    b(6) % 4,
                    10 + b(7) % 90,
                )
            }
            TemplateId::Img2Plot | TemplateId::Tikz2Plot => {
                let lead = if req.template_id == TemplateId::Img2Plot {
                    "The image can be generated using the following Python code:\n"
                } else {
                    "Here is the translated code.\n"
                };
                format!(
                    "{lead}```python\nimport matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\nfig, ax = plt.subplots(figsize=(4, 3))\nax.plot([0, {}, {}], [0, {}, {}], marker=\"o\")\nax.set_title(\"sample {}\")\nfig.savefig(\"figure.png\", dpi=100)\n```",
                    1 + b(0) % 9,
                    2 + b(1) % 9,
                    1 + b(2) % 9,
                    2 + b(3) % 9,
                    b(4) % 1000,
                )
            }
            TemplateId::K12Process => self.generate_k12(rendered),
            TemplateId::QuestionSynth => {
                format!(
                    "Based on the figure, a segment starts at (0, 0) and ends at ({}, {}). What is the sum of the endpoint coordinates?",
                    1 + b(0) % 9,
                    1 + b(1) % 9,
                )
            }
            TemplateId::Solve => {
                let base = (u32::from_be_bytes([seed[0], seed[1], seed[2], seed[3]]) % 1000) as i64;
                let salt_offset = self
                    .config
                    .answer_salt
                    .trim()
                    .parse::<i64>()
                    .unwrap_or(0)
                    * 1_000_000;
                format!(
                    "Step 1: Read the coordinates from the code.\nStep 2: Combine the values arithmetically.\nThe final answer is shown below.\n\\boxed{{{}}}",
                    base + salt_offset
                )
            }
        }
    }

    /// K12 responses follow the three-section layout the prompt requests,
    /// echoing answer1 from the embedded JSON when it is present.
    fn generate_k12(&self, rendered: &RenderedPrompt) -> String {
        let embedded = rendered
            .user
            .find("```json\n")
            .and_then(|start| {
                let rest = &rendered.user[start + 8..];
                rest.find("\n```").map(|end| &rest[..end])
            })
            .and_then(|raw| serde_json::from_str::<serde_json::Value>(raw).ok());
        let question = embedded
            .as_ref()
            .and_then(|v| v.get("question"))
            .and_then(|q| q.as_str())
            .unwrap_or("What is the value shown in the figure?")
            .to_string();
        let answer = embedded
            .as_ref()
            .and_then(|v| v.get("answer1"))
            .and_then(|a| a.as_str())
            .filter(|a| !a.trim().is_empty())
            .unwrap_or("42")
            .to_string();
        let mut options = String::new();
        if let Some(v) = &embedded {
            for (letter, field) in [
                ("A", "option_a"),
                ("B", "option_b"),
                ("C", "option_c"),
                ("D", "option_d"),
                ("E", "option_e"),
            ] {
                if let Some(text) = v.get(field).and_then(|o| o.as_str()) {
                    if !text.trim().is_empty() {
                        options.push_str(&format!("- {letter}. {text}\n"));
                    }
                }
            }
        }
        format!(
            "### Translation:\n{question}\n{options}\n### Step-by-Step Solution:\nStep 1: Restate the problem.\nStep 2: Apply the method given by the provided solution.\nStep 3: Conclude the answer.\n\n### Short Answer:\n[\"{answer}\"]"
        )
    }
}
