//! K12 problem processing: figure/equation split, OCR delegation, CoT
//! augmentation through the model gate, and schema validation of the
//! structured output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{classify_asset, AssetKind, Catalog, ClassifyConfig, ImageAsset};
use crate::filters::{FilterVerdict, RejectReason};
use crate::modelgate::{GateError, GenerationRequest, ModelGate, TemplateId};

/// A problem as collected: the field set matches the processing prompt's
/// JSON contract exactly, plus artifact bookkeeping (id, image refs).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawProblem {
    pub problem_id: String,
    pub question: String,
    #[serde(default)]
    pub option_a: Option<String>,
    #[serde(default)]
    pub option_b: Option<String>,
    #[serde(default)]
    pub option_c: Option<String>,
    #[serde(default)]
    pub option_d: Option<String>,
    #[serde(default)]
    pub option_e: Option<String>,
    #[serde(default)]
    pub answer1: String,
    #[serde(default)]
    pub answer2: String,
    #[serde(default)]
    pub parse: String,
    #[serde(default)]
    pub image_refs: Vec<String>,
}

impl RawProblem {
    /// The JSON object the processing prompt receives, fields in the
    /// order the prompt lists them.
    pub fn to_prompt_json(&self) -> String {
        let mut out = String::from("{");
        let mut push = |key: &str, value: Option<&str>, first: bool| {
            if !first {
                out.push_str(", ");
            }
            out.push_str(&format!(
                "{}: {}",
                serde_json::to_string(key).unwrap(),
                match value {
                    Some(v) => serde_json::to_string(v).unwrap(),
                    None => "null".to_string(),
                }
            ));
        };
        push("question", Some(&self.question), true);
        push("option_a", self.option_a.as_deref(), false);
        push("option_b", self.option_b.as_deref(), false);
        push("option_c", self.option_c.as_deref(), false);
        push("option_d", self.option_d.as_deref(), false);
        push("option_e", self.option_e.as_deref(), false);
        push("answer1", Some(&self.answer1), false);
        push("answer2", Some(&self.answer2), false);
        push("parse", Some(&self.parse), false);
        out.push('}');
        out
    }
}

/// A processed problem ready for instruction data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcessedProblem {
    pub problem_id: String,
    pub question_en: String,
    pub options: Vec<String>,
    pub sub_questions: Vec<String>,
    pub solution_cot: String,
    pub short_answers: Vec<String>,
    pub figure_refs: Vec<String>,
}

#[derive(Debug, Error)]
pub enum K12Error {
    #[error("missing asset: {0}")]
    MissingAsset(String),
    #[error("ocr unreachable: {0}")]
    OcrUnreachable(String),
    #[error("schema invalid: {0}")]
    SchemaInvalid(String),
    #[error("precondition violation: {0}")]
    PreconditionViolation(String),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Split a problem's images into figures and equations by size.
pub fn partition_problem_images(
    problem: &RawProblem,
    catalog: &Catalog,
    cfg: &ClassifyConfig,
) -> Result<(Vec<ImageAsset>, Vec<ImageAsset>), K12Error> {
    let mut figures = Vec::new();
    let mut equations = Vec::new();
    for id in &problem.image_refs {
        let asset = catalog
            .find_asset(id)
            .ok_or_else(|| K12Error::MissingAsset(id.clone()))?;
        match classify_asset(&asset, cfg) {
            AssetKind::Equation => equations.push(asset),
            _ => figures.push(asset),
        }
    }
    Ok((figures, equations))
}

/// Problems whose images are all equations (or that have no images at
/// all) are inadmissible; at least one actual figure is required.
pub fn admit_problem(figures: &[ImageAsset]) -> FilterVerdict {
    if figures.is_empty() {
        FilterVerdict::reject(RejectReason::ForbiddenAccess, "no figure images")
    } else {
        FilterVerdict::Pass
    }
}

/// External OCR service role: image in, LaTeX out.
pub trait OcrClient: Send + Sync {
    fn ocr(&self, asset: &ImageAsset) -> Result<String, String>;
}

/// Fixture-table OCR stub keyed by image digest.
#[derive(Debug, Clone, Default)]
pub struct StubOcr {
    pub fixtures: BTreeMap<String, String>,
    /// Digests listed here fail, to exercise the flagging path.
    pub failing: Vec<String>,
}

impl OcrClient for StubOcr {
    fn ocr(&self, asset: &ImageAsset) -> Result<String, String> {
        if self.failing.contains(&asset.digest.hex) {
            return Err("stub ocr failure".to_string());
        }
        Ok(self
            .fixtures
            .get(&asset.digest.hex)
            .cloned()
            .unwrap_or_else(|| format!("\\text{{eq-{}}}", asset.digest.short())))
    }
}

/// HTTP OCR client: posts the image, expects `{"latex": "..."}`.
pub struct HttpOcr {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpOcr {
    pub fn new(base_url: String) -> HttpOcr {
        HttpOcr {
            base_url,
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(std::time::Duration::from_secs(60)))
                .build()
                .into(),
        }
    }
}

impl OcrClient for HttpOcr {
    fn ocr(&self, asset: &ImageAsset) -> Result<String, String> {
        use base64::Engine;
        let bytes = fs::read(&asset.storage_ref).map_err(|e| e.to_string())?;
        let body = serde_json::json!({
            "image": base64::engine::general_purpose::STANDARD.encode(bytes),
        });
        let url = format!("{}/ocr", self.base_url.trim_end_matches('/'));
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let value: serde_json::Value =
            response.body_mut().read_json().map_err(|e| e.to_string())?;
        value
            .get("latex")
            .and_then(|l| l.as_str())
            .map(str::to_string)
            .ok_or_else(|| "no latex field in OCR response".to_string())
    }
}

/// Result of splicing OCR'd equations into the question text.
#[derive(Debug, Clone, PartialEq)]
pub struct OcrOutcome {
    pub question: String,
    pub latex_by_asset: BTreeMap<String, String>,
    pub failed_assets: Vec<String>,
}

/// Token an equation image is referenced by inside question markup.
pub fn image_token(asset_id: &str) -> String {
    format!("<img:{asset_id}>")
}

/// Replace each equation image reference with its OCR'd LaTeX, inline at
/// the reference token when present, appended in order otherwise. OCR
/// failures leave a flagged placeholder and never abort the problem.
pub fn ocr_equations(
    question: &str,
    equations: &[ImageAsset],
    client: &dyn OcrClient,
) -> OcrOutcome {
    let mut text = question.to_string();
    let mut latex_by_asset = BTreeMap::new();
    let mut failed_assets = Vec::new();
    for asset in equations {
        let token = image_token(&asset.asset_id);
        let replacement = match client.ocr(asset) {
            Ok(latex) => {
                latex_by_asset.insert(asset.asset_id.clone(), latex.clone());
                format!("${latex}$")
            }
            Err(_) => {
                failed_assets.push(asset.asset_id.clone());
                format!("[OCR-FAILED:{}]", asset.asset_id)
            }
        };
        if text.contains(&token) {
            text = text.replace(&token, &replacement);
        } else {
            text.push_str(&format!(" [equation: {replacement}]"));
        }
    }
    OcrOutcome {
        question: text,
        latex_by_asset,
        failed_assets,
    }
}

fn section_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?mi)^\s*(?:#{1,6}\s*)?(?:\*\*)?\s*(?:\d+[.)]\s*)?(translation|step-by-step solution|short answer)\s*:?\**\s*:?\s*$",
        )
        .expect("static regex compiles")
    })
}

/// The parsed parts of a structured processing response.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSections {
    pub question_en: String,
    pub options: Vec<String>,
    pub sub_questions: Vec<String>,
    pub solution_cot: String,
    pub short_answers: Vec<String>,
}

/// Parse the three-section structured response into its parts. Section
/// headers are matched case-insensitively with optional markdown dressing.
pub fn parse_structured_response(raw: &str) -> Result<ParsedSections, String> {
    let re = section_header_re();
    let mut sections: Vec<(String, String)> = Vec::new();
    let mut last: Option<(String, usize)> = None;
    for m in re.captures_iter(raw) {
        let whole = m.get(0).unwrap();
        let name = m.get(1).unwrap().as_str().to_ascii_lowercase();
        if let Some((prev_name, prev_end)) = last.take() {
            sections.push((prev_name, raw[prev_end..whole.start()].trim().to_string()));
        }
        last = Some((name, whole.end()));
    }
    if let Some((prev_name, prev_end)) = last {
        sections.push((prev_name, raw[prev_end..].trim().to_string()));
    }
    let find = |name: &str| -> Option<&str> {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, body)| body.as_str())
    };
    let translation = find("translation").ok_or("missing Translation section")?;
    let solution = find("step-by-step solution").ok_or("missing Step-by-Step Solution section")?;
    let short = find("short answer").ok_or("missing Short Answer section")?;

    let (question_en, options, sub_questions) = parse_translation(translation);
    let short_answers = parse_short_answers(short)?;
    Ok(ParsedSections {
        question_en,
        options,
        sub_questions,
        solution_cot: solution.to_string(),
        short_answers,
    })
}

fn parse_translation(body: &str) -> (String, Vec<String>, Vec<String>) {
    let bullet = Regex::new(r"^\s*[-*]\s+(.+)$").unwrap();
    let numbered = Regex::new(r"^\s*(?:\((\d+)\)|(\d+)[.)])\s+(.+)$").unwrap();
    let mut question_lines = Vec::new();
    let mut options = Vec::new();
    let mut sub_questions = Vec::new();
    for line in body.lines() {
        if let Some(c) = bullet.captures(line) {
            options.push(c[1].trim().to_string());
        } else if let Some(c) = numbered.captures(line) {
            sub_questions.push(c[3].trim().to_string());
        } else if !line.trim().is_empty() {
            question_lines.push(line.trim());
        }
    }
    (question_lines.join(" "), options, sub_questions)
}

fn parse_short_answers(body: &str) -> Result<Vec<String>, String> {
    // JSON list form first, the form the prompt asks for.
    if let (Some(start), Some(end)) = (body.find('['), body.rfind(']')) {
        if start < end {
            if let Ok(values) = serde_json::from_str::<Vec<serde_json::Value>>(&body[start..=end]) {
                let answers: Vec<String> = values
                    .into_iter()
                    .map(|v| match v {
                        serde_json::Value::String(s) => s,
                        other => other.to_string(),
                    })
                    .collect();
                return Ok(answers);
            }
        }
    }
    // Fall back to bullets or bare lines.
    let answers: Vec<String> = body
        .lines()
        .map(|l| l.trim().trim_start_matches(['-', '*']).trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if answers.is_empty() {
        Err("no short answers found".to_string())
    } else {
        Ok(answers)
    }
}

/// Validate a processed problem against the output contract.
pub fn validate_processed(p: &ProcessedProblem) -> FilterVerdict {
    let fail = |detail: String| FilterVerdict::reject(RejectReason::ForbiddenAccess, detail);
    if p.solution_cot.trim().is_empty() {
        return fail("empty solution".to_string());
    }
    if p.short_answers.is_empty() {
        return fail("no short answers".to_string());
    }
    if p.figure_refs.is_empty() {
        return fail("no figure images".to_string());
    }
    if !p.sub_questions.is_empty() && p.short_answers.len() != p.sub_questions.len() {
        return fail(format!(
            "{} answers for {} sub-questions",
            p.short_answers.len(),
            p.sub_questions.len()
        ));
    }
    if p.sub_questions.is_empty() && p.short_answers.len() != 1 {
        return fail(format!("{} answers for a single question", p.short_answers.len()));
    }
    for answer in &p.short_answers {
        let trimmed = answer.trim();
        if trimmed.is_empty() || trimmed.contains('\n') || trimmed.chars().count() > 60 {
            return fail(format!("answer {trimmed:?} is not a single word or phrase"));
        }
        if !p.options.is_empty() {
            let ok_choice = trimmed.len() == 1
                && trimmed
                    .chars()
                    .next()
                    .map(|c| ('A'..='E').contains(&c.to_ascii_uppercase()))
                    .unwrap_or(false);
            let ok_proven = trimmed.eq_ignore_ascii_case("proven");
            if !ok_choice && !ok_proven {
                return fail(format!("multiple-choice answer {trimmed:?} not in A..E"));
            }
        }
    }
    FilterVerdict::Pass
}

/// Ask the model for the structured translation/solution/answer output and
/// validate it. Invalid responses are retried once, then rejected.
pub fn augment(
    problem: &RawProblem,
    figures: &[ImageAsset],
    gate: &ModelGate,
    endpoint_id: &str,
) -> Result<ProcessedProblem, K12Error> {
    if figures.is_empty() {
        return Err(K12Error::PreconditionViolation(
            "problem was not admitted: no figure images".to_string(),
        ));
    }
    let mut last_reason = String::new();
    for attempt in 0..2 {
        let mut req = GenerationRequest::new(TemplateId::K12Process, endpoint_id)
            .slot("json", problem.to_prompt_json());
        req.sample_nonce = attempt;
        let result = gate.complete(&req)?;
        match parse_structured_response(&result.raw_text) {
            Ok(parsed) => {
                let processed = ProcessedProblem {
                    problem_id: problem.problem_id.clone(),
                    question_en: parsed.question_en,
                    options: parsed.options,
                    sub_questions: parsed.sub_questions,
                    solution_cot: parsed.solution_cot,
                    short_answers: parsed.short_answers,
                    figure_refs: figures.iter().map(|f| f.asset_id.clone()).collect(),
                };
                match validate_processed(&processed) {
                    FilterVerdict::Pass => return Ok(processed),
                    FilterVerdict::Reject { detail, .. } => last_reason = detail,
                }
            }
            Err(reason) => last_reason = reason,
        }
    }
    Err(K12Error::SchemaInvalid(last_reason))
}

/// Read raw problems from newline-delimited JSON.
pub fn read_problems(path: &Path) -> Result<Vec<RawProblem>, K12Error> {
    let text = fs::read_to_string(path)?;
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: RawProblem = serde_json::from_str(line)
            .map_err(|e| K12Error::SchemaInvalid(format!("line {}: {e}", i + 1)))?;
        problems.push(p);
    }
    Ok(problems)
}

/// Write processed problems as newline-delimited JSON, atomically.
pub fn write_processed(path: &Path, problems: &[ProcessedProblem]) -> Result<(), K12Error> {
    let mut buf = Vec::new();
    for p in problems {
        serde_json::to_writer(&mut buf, p).expect("processed problem serializes");
        buf.push(b'\n');
    }
    crate::pairs::write_atomic(path, &buf)?;
    Ok(())
}
