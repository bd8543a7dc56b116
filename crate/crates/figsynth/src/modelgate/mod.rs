//! Uniform client over external model endpoints.
//!
//! All five generation tasks go through one gateway: prompt rendering,
//! image attachment, retries with exponential backoff, per-endpoint
//! in-flight and rate limits, and fenced-code extraction. Endpoints are
//! configured by id; a deterministic stub endpoint is a first-class kind
//! so whole-pipeline runs can be golden-tested.

mod extract;
mod http;
mod limits;
mod stub;
mod templates;

pub use extract::{extract_code_block, wrap_code_block};
pub use stub::{stub_request_key, StubConfig, StubStats};
pub use templates::{
    render_parts, render_prompt, response_lead_in, template, PromptTemplate, RenderedPrompt, Slot,
    TemplateId,
};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::ImageAsset;
use http::HttpTransport;
use limits::{InFlightLimiter, TokenBucket};
use stub::StubTransport;

pub const DEFAULT_MAX_TOKENS: u32 = 4096;

/// The two code dialects handled as data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Dialect {
    Tikz,
    PlotScript,
}

impl Dialect {
    pub fn name(&self) -> &'static str {
        match self {
            Dialect::Tikz => "TikZ",
            Dialect::PlotScript => "Python",
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Dialect::Tikz => "TIKZ",
            Dialect::PlotScript => "PLOTSCRIPT",
        }
    }

    pub fn parse(s: &str) -> Option<Dialect> {
        match s.to_ascii_uppercase().as_str() {
            "TIKZ" => Some(Dialect::Tikz),
            "PLOTSCRIPT" | "PYTHON" | "PLOT" => Some(Dialect::PlotScript),
            _ => None,
        }
    }

    /// Fence labels accepted when extracting this dialect from a response.
    pub fn fence_labels(&self) -> &'static [&'static str] {
        match self {
            Dialect::Tikz => &["tikz", "latex"],
            Dialect::PlotScript => &["python"],
        }
    }

    pub fn primary_fence_label(&self) -> &'static str {
        match self {
            Dialect::Tikz => "tikz",
            Dialect::PlotScript => "python",
        }
    }

    /// Template used when generating this dialect from an image.
    pub fn image_template(&self) -> TemplateId {
        match self {
            Dialect::Tikz => TemplateId::Img2Tikz,
            Dialect::PlotScript => TemplateId::Img2Plot,
        }
    }
}

/// Where a code sample came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed_asset_id: Option<String>,
    pub round_index: u32,
    pub endpoint_id: String,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ancestor_code_id: Option<String>,
}

/// Figure-generating code in one dialect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSample {
    pub code_id: String,
    pub dialect: Dialect,
    pub text: String,
    pub provenance: Provenance,
}

impl CodeSample {
    pub fn new(dialect: Dialect, text: String, provenance: Provenance) -> CodeSample {
        let mut h = Sha256::new();
        h.update(dialect.tag().as_bytes());
        h.update([0]);
        h.update(text.as_bytes());
        h.update([0]);
        h.update(provenance.seed_asset_id.as_deref().unwrap_or("").as_bytes());
        h.update(provenance.round_index.to_be_bytes());
        let id = format!("code-{}", &hex::encode(h.finalize())[..16]);
        CodeSample {
            code_id: id,
            dialect,
            text,
            provenance,
        }
    }
}

/// Image payload attached to a request.
#[derive(Debug, Clone)]
pub struct AttachedImage {
    pub asset_id: String,
    pub digest_hex: String,
    pub media_type: String,
    pub bytes: Vec<u8>,
}

impl AttachedImage {
    pub fn load(asset: &ImageAsset) -> Result<AttachedImage, GateError> {
        let bytes = std::fs::read(&asset.storage_ref)
            .map_err(|e| GateError::AssetUnavailable(format!("{}: {e}", asset.storage_ref.display())))?;
        Ok(AttachedImage {
            asset_id: asset.asset_id.clone(),
            digest_hex: asset.digest.hex.clone(),
            media_type: media_type_for(&asset.storage_ref),
            bytes,
        })
    }
}

fn media_type_for(path: &Path) -> String {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jpg") | Some("jpeg") => "image/jpeg".to_string(),
        _ => "image/png".to_string(),
    }
}

/// One generation request, fully specified.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub template_id: TemplateId,
    pub slots: BTreeMap<String, String>,
    pub image: Option<AttachedImage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub endpoint_id: String,
    /// Distinguishes repeated samples of the same prompt at nonzero
    /// temperature; ignored by HTTP transports, mixed into the stub's
    /// derivation so resampling yields fresh outputs deterministically.
    pub sample_nonce: u32,
    pub provenance_seed: Option<String>,
    pub round_index: u32,
    pub ancestor_code_id: Option<String>,
}

impl GenerationRequest {
    pub fn new(template_id: TemplateId, endpoint_id: impl Into<String>) -> GenerationRequest {
        GenerationRequest {
            template_id,
            slots: BTreeMap::new(),
            image: None,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            endpoint_id: endpoint_id.into(),
            sample_nonce: 0,
            provenance_seed: None,
            round_index: 0,
            ancestor_code_id: None,
        }
    }

    pub fn slot(mut self, name: &str, value: impl Into<String>) -> Self {
        self.slots.insert(name.to_string(), value.into());
        self
    }
}

/// Result of one completed generation.
#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub raw_text: String,
    /// Present iff a fenced block of the expected dialect was found.
    pub extracted_code: Option<CodeSample>,
    pub endpoint_id: String,
    pub attempt_count: u32,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum GateError {
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("template {template} missing slot {slot}")]
    MissingSlot { template: String, slot: String },
    #[error("unknown endpoint: {0}")]
    UnknownEndpoint(String),
    #[error("endpoint {endpoint_id} unreachable after {attempts} attempts: {last_error}")]
    EndpointUnreachable {
        endpoint_id: String,
        attempts: u32,
        last_error: String,
    },
    #[error("malformed response from {endpoint_id}: {detail}")]
    MalformedResponse { endpoint_id: String, detail: String },
    #[error("precondition violation: {0}")]
    PreconditionViolation(String),
    #[error("asset unavailable: {0}")]
    AssetUnavailable(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Retry policy for transient transport failures.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 1000,
            backoff_factor: 2.0,
        }
    }
}

/// HTTP endpoint settings (chat-completions style API).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpEndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_s")]
    pub request_timeout_s: u64,
}

fn default_timeout_s() -> u64 {
    120
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointKind {
    Http(HttpEndpointConfig),
    Stub(StubConfig),
}

/// One configured endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub id: String,
    #[serde(flatten)]
    pub kind: EndpointKind,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn stub(id: impl Into<String>) -> EndpointConfig {
        EndpointConfig {
            id: id.into(),
            kind: EndpointKind::Stub(StubConfig::default()),
            max_in_flight: None,
            requests_per_second: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn stub_with(id: impl Into<String>, cfg: StubConfig) -> EndpointConfig {
        EndpointConfig {
            id: id.into(),
            kind: EndpointKind::Stub(cfg),
            max_in_flight: None,
            requests_per_second: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug)]
pub(crate) struct TransportFailure {
    pub retryable: bool,
    pub detail: String,
}

enum TransportImpl {
    Http(HttpTransport),
    Stub(StubTransport),
}

struct Endpoint {
    config: EndpointConfig,
    limiter: InFlightLimiter,
    bucket: Option<TokenBucket>,
    transport: TransportImpl,
}

/// The gateway: a table of configured endpoints, safe for concurrent use.
pub struct ModelGate {
    endpoints: HashMap<String, Endpoint>,
}

impl ModelGate {
    pub fn new(configs: Vec<EndpointConfig>) -> ModelGate {
        let mut endpoints = HashMap::new();
        for config in configs {
            let transport = match &config.kind {
                EndpointKind::Http(http_cfg) => {
                    TransportImpl::Http(HttpTransport::new(http_cfg.clone()))
                }
                EndpointKind::Stub(stub_cfg) => {
                    TransportImpl::Stub(StubTransport::new(stub_cfg.clone()))
                }
            };
            let limiter = InFlightLimiter::new(config.max_in_flight.unwrap_or(64));
            let bucket = config
                .requests_per_second
                .map(|rps| TokenBucket::new(rps, rps.max(1.0)));
            endpoints.insert(
                config.id.clone(),
                Endpoint {
                    config,
                    limiter,
                    bucket,
                    transport,
                },
            );
        }
        ModelGate { endpoints }
    }

    pub fn has_endpoint(&self, id: &str) -> bool {
        self.endpoints.contains_key(id)
    }

    /// Concurrency instrumentation for a stub endpoint, if it is one.
    pub fn stub_stats(&self, endpoint_id: &str) -> Option<Arc<StubStats>> {
        match &self.endpoints.get(endpoint_id)?.transport {
            TransportImpl::Stub(stub) => Some(stub.stats()),
            TransportImpl::Http(_) => None,
        }
    }

    /// Issue a request: render, attempt with backoff up to the endpoint's
    /// retry budget, record the attempt count, extract code when the
    /// template yields a dialect.
    pub fn complete(&self, req: &GenerationRequest) -> Result<GenerationResult, GateError> {
        if !req.temperature.is_finite() || req.temperature < 0.0 {
            return Err(GateError::InvalidRequest(format!(
                "temperature {} not finite and non-negative",
                req.temperature
            )));
        }
        if req.max_tokens == 0 {
            return Err(GateError::InvalidRequest("max_tokens must be positive".into()));
        }
        let endpoint = self
            .endpoints
            .get(&req.endpoint_id)
            .ok_or_else(|| GateError::UnknownEndpoint(req.endpoint_id.clone()))?;
        let rendered = render_parts(req.template_id, &req.slots)?;

        let _permit = endpoint.limiter.acquire();
        if let Some(bucket) = &endpoint.bucket {
            bucket.take();
        }

        let retry = &endpoint.config.retry;
        let started = Instant::now();
        let mut last_error = String::new();
        for attempt in 1..=retry.max_attempts.max(1) {
            let sent = match &endpoint.transport {
                TransportImpl::Http(http) => http.send(&rendered, req),
                TransportImpl::Stub(stub) => stub.send(&rendered, req),
            };
            match sent {
                Ok(raw_text) => {
                    let extracted_code = self.extract(req, &raw_text);
                    return Ok(GenerationResult {
                        raw_text,
                        extracted_code,
                        endpoint_id: req.endpoint_id.clone(),
                        attempt_count: attempt,
                        latency_ms: started.elapsed().as_millis() as u64,
                    });
                }
                Err(failure) if failure.retryable => {
                    last_error = failure.detail;
                    if attempt < retry.max_attempts {
                        let backoff = retry.backoff_base_ms as f64
                            * retry.backoff_factor.powi(attempt as i32 - 1);
                        std::thread::sleep(Duration::from_millis(backoff as u64));
                    }
                }
                Err(failure) => {
                    return Err(GateError::MalformedResponse {
                        endpoint_id: req.endpoint_id.clone(),
                        detail: failure.detail,
                    });
                }
            }
        }
        Err(GateError::EndpointUnreachable {
            endpoint_id: req.endpoint_id.clone(),
            attempts: retry.max_attempts.max(1),
            last_error,
        })
    }

    fn extract(&self, req: &GenerationRequest, raw_text: &str) -> Option<CodeSample> {
        let dialect = expected_dialect(req.template_id)?;
        let text = extract_code_block(raw_text, dialect)?;
        if text.trim().is_empty() {
            return None;
        }
        Some(CodeSample::new(
            dialect,
            text,
            Provenance {
                seed_asset_id: req
                    .provenance_seed
                    .clone()
                    .or_else(|| req.image.as_ref().map(|i| i.asset_id.clone())),
                round_index: req.round_index,
                endpoint_id: req.endpoint_id.clone(),
                temperature: req.temperature,
                ancestor_code_id: req.ancestor_code_id.clone(),
            },
        ))
    }

    /// Generate figure code of the given dialect from an image.
    pub fn image_to_code(
        &self,
        asset: &ImageAsset,
        dialect: Dialect,
        temperature: f64,
        endpoint_id: &str,
        round_index: u32,
        sample_nonce: u32,
    ) -> Result<GenerationResult, GateError> {
        let image = AttachedImage::load(asset)?;
        let mut req = GenerationRequest::new(dialect.image_template(), endpoint_id);
        req.image = Some(image);
        req.temperature = temperature;
        req.round_index = round_index;
        req.sample_nonce = sample_nonce;
        req.provenance_seed = Some(asset.asset_id.clone());
        self.complete(&req)
    }

    /// Translate a TikZ sample into a plot script, provenance-linked to
    /// the source sample.
    pub fn translate_code(
        &self,
        src: &CodeSample,
        endpoint_id: &str,
    ) -> Result<GenerationResult, GateError> {
        if src.dialect != Dialect::Tikz {
            return Err(GateError::PreconditionViolation(format!(
                "translate_code requires a TIKZ source, got {}",
                src.dialect.tag()
            )));
        }
        let mut req =
            GenerationRequest::new(TemplateId::Tikz2Plot, endpoint_id).slot("code", &src.text);
        req.provenance_seed = src.provenance.seed_asset_id.clone();
        req.round_index = src.provenance.round_index;
        req.ancestor_code_id = Some(src.code_id.clone());
        self.complete(&req)
    }
}

/// Dialect a template's response is expected to carry, if any.
pub fn expected_dialect(template_id: TemplateId) -> Option<Dialect> {
    match template_id {
        TemplateId::Img2Tikz => Some(Dialect::Tikz),
        TemplateId::Img2Plot => Some(Dialect::PlotScript),
        TemplateId::Tikz2Plot => Some(Dialect::PlotScript),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::Ordering;

    fn gate_with(cfg: StubConfig) -> ModelGate {
        let mut e = EndpointConfig::stub_with("stub", cfg);
        e.retry.backoff_base_ms = 1;
        ModelGate::new(vec![e])
    }

    fn png_asset(dir: &Path, v: u8) -> ImageAsset {
        let img = image::RgbImage::from_pixel(8, 8, image::Rgb([v, v, v]));
        let path = dir.join(format!("a{v}.png"));
        img.save(&path).unwrap();
        let (w, h, digest) = crate::corpus::digest_image_file(&path).unwrap();
        ImageAsset {
            asset_id: format!("img-{}", digest.short()),
            source: crate::corpus::SourceTag::K12,
            width_px: w,
            height_px: h,
            digest,
            storage_ref: path,
            kind: crate::corpus::AssetKind::Unknown,
        }
    }

    #[test]
    fn image_to_code_extracts_tikz_from_stub() {
        let dir = tempfile::TempDir::new().unwrap();
        let asset = png_asset(dir.path(), 10);
        let gate = gate_with(StubConfig::default());
        let res = gate
            .image_to_code(&asset, Dialect::Tikz, 0.0, "stub", 0, 0)
            .unwrap();
        let code = res.extracted_code.expect("stub returns a tikz block");
        assert_eq!(code.dialect, Dialect::Tikz);
        assert_eq!(code.provenance.seed_asset_id.as_deref(), Some(asset.asset_id.as_str()));
    }

    #[test]
    fn no_code_block_leaves_extracted_none_with_raw_preserved() {
        let dir = tempfile::TempDir::new().unwrap();
        let asset = png_asset(dir.path(), 20);
        let mut cfg = StubConfig::default();
        let key = {
            let req_user = template(TemplateId::Img2Tikz).user_text;
            stub_request_key(TemplateId::Img2Tikz, req_user, Some(&asset.digest.hex), 0, 0.0)
        };
        cfg.fixtures.insert(key, "just prose, no fence".to_string());
        let gate = gate_with(cfg);
        let res = gate
            .image_to_code(&asset, Dialect::Tikz, 0.0, "stub", 0, 0)
            .unwrap();
        assert!(res.extracted_code.is_none());
        assert_eq!(res.raw_text, "just prose, no fence");
    }

    #[test]
    fn temperature_is_forwarded_verbatim() {
        let dir = tempfile::TempDir::new().unwrap();
        let asset = png_asset(dir.path(), 30);
        let gate = gate_with(StubConfig::default());
        // The stub derives output from the nonce only when temperature > 0;
        // two nonces at 0.7 must differ, proving temperature reached the wire.
        let a = gate
            .image_to_code(&asset, Dialect::Tikz, 0.7, "stub", 0, 0)
            .unwrap();
        let b = gate
            .image_to_code(&asset, Dialect::Tikz, 0.7, "stub", 0, 1)
            .unwrap();
        let c = gate
            .image_to_code(&asset, Dialect::Tikz, 0.0, "stub", 0, 1)
            .unwrap();
        let d = gate
            .image_to_code(&asset, Dialect::Tikz, 0.0, "stub", 0, 2)
            .unwrap();
        assert_ne!(a.raw_text, b.raw_text);
        assert_eq!(c.raw_text, d.raw_text);
    }

    #[test]
    fn translate_code_links_provenance_and_checks_dialect() {
        let gate = gate_with(StubConfig::default());
        let src = CodeSample::new(
            Dialect::Tikz,
            "\\draw (0,0) rectangle (2,2);".to_string(),
            Provenance {
                seed_asset_id: Some("img-seed".to_string()),
                round_index: 3,
                endpoint_id: "other".to_string(),
                temperature: 0.0,
                ancestor_code_id: None,
            },
        );
        let res = gate.translate_code(&src, "stub").unwrap();
        let out = res.extracted_code.expect("stub translates");
        assert_eq!(out.dialect, Dialect::PlotScript);
        assert_eq!(out.provenance.seed_asset_id.as_deref(), Some("img-seed"));
        assert_eq!(out.provenance.ancestor_code_id.as_deref(), Some(src.code_id.as_str()));

        let not_tikz = CodeSample::new(Dialect::PlotScript, "plot()".to_string(), Provenance::default());
        assert!(matches!(
            gate.translate_code(&not_tikz, "stub"),
            Err(GateError::PreconditionViolation(_))
        ));
    }

    #[test]
    fn retry_succeeds_within_budget() {
        let mut cfg = StubConfig::default();
        cfg.fail_first_attempts = 2;
        let gate = gate_with(cfg);
        let req = GenerationRequest::new(TemplateId::QuestionSynth, "stub")
            .slot("dialect_name", "TikZ")
            .slot("code", "x");
        let res = gate.complete(&req).unwrap();
        assert_eq!(res.attempt_count, 3);
    }

    #[test]
    fn retry_budget_exhaustion_is_unreachable() {
        let mut cfg = StubConfig::default();
        cfg.fail_first_attempts = u32::MAX;
        let mut e = EndpointConfig::stub_with("stub", cfg);
        e.retry = RetryPolicy {
            max_attempts: 1,
            backoff_base_ms: 1,
            backoff_factor: 2.0,
        };
        let gate = ModelGate::new(vec![e]);
        let req = GenerationRequest::new(TemplateId::QuestionSynth, "stub")
            .slot("dialect_name", "TikZ")
            .slot("code", "x");
        assert!(matches!(
            gate.complete(&req),
            Err(GateError::EndpointUnreachable { attempts: 1, .. })
        ));
    }

    #[test]
    fn in_flight_limit_is_respected() {
        let mut cfg = StubConfig::default();
        cfg.work_delay_ms = 5;
        let mut e = EndpointConfig::stub_with("stub", cfg);
        e.max_in_flight = Some(2);
        let gate = Arc::new(ModelGate::new(vec![e]));
        let stats = gate.stub_stats("stub").unwrap();
        let mut handles = Vec::new();
        for i in 0..12 {
            let gate = Arc::clone(&gate);
            handles.push(std::thread::spawn(move || {
                let req = GenerationRequest::new(TemplateId::QuestionSynth, "stub")
                    .slot("dialect_name", "TikZ")
                    .slot("code", format!("c{i}"));
                gate.complete(&req).unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(stats.peak_concurrency() <= 2, "peak {}", stats.peak_concurrency());
        assert_eq!(stats.calls.load(Ordering::SeqCst), 12);
    }

    #[test]
    fn identical_requests_are_deterministic_under_stub() {
        let gate = gate_with(StubConfig::default());
        let req = GenerationRequest::new(TemplateId::QuestionSynth, "stub")
            .slot("dialect_name", "Python")
            .slot("code", "plot重复()");
        let a = gate.complete(&req).unwrap();
        let b = gate.complete(&req).unwrap();
        assert_eq!(a.raw_text, b.raw_text);
    }

    #[test]
    fn extraction_soundness_rewrap_is_substring() {
        let dir = tempfile::TempDir::new().unwrap();
        let asset = png_asset(dir.path(), 44);
        let gate = gate_with(StubConfig::default());
        for dialect in [Dialect::Tikz, Dialect::PlotScript] {
            let res = gate
                .image_to_code(&asset, dialect, 0.0, "stub", 0, 0)
                .unwrap();
            let code = res.extracted_code.unwrap();
            let rewrapped = format!(
                "```{}\n{}\n```",
                dialect.primary_fence_label(),
                code.text
            );
            assert!(res.raw_text.contains(&rewrapped));
        }
    }

    #[test]
    fn unknown_endpoint_is_an_error() {
        let gate = gate_with(StubConfig::default());
        let req = GenerationRequest::new(TemplateId::Img2Tikz, "nope");
        assert!(matches!(
            gate.complete(&req),
            Err(GateError::UnknownEndpoint(_))
        ));
    }
}
