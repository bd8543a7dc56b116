//! Synthesis of new math problems over newly generated figures.
//!
//! Seeds are resynthesized into diverse figures at high temperature, a
//! question is crafted from each figure's code, two independent solver
//! roles answer it, and only answer-consistent samples are kept.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::ImageAsset;
use crate::filters::{pixel_stats_from_bytes, run_chain, ChainStats, DedupStore, FilterConfig};
use crate::modelgate::{
    GateError, GenerationRequest, ModelGate, TemplateId,
};
use crate::pairs::{assemble_pair, PairRecord};
use crate::render::{RenderStatus, Renderer};

/// A crafted standalone question about one synthesized figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthQuestion {
    pub question_id: String,
    pub text: String,
    pub source_pair_id: String,
    pub dialect: crate::modelgate::Dialect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SolverRole {
    MathSpecialist,
    Generalist,
}

/// What a solver's written solution boils down to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExtractedAnswer {
    Numeric(f64),
    Choice(char),
    Text(String),
    Proven,
    None,
}

impl ExtractedAnswer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ExtractedAnswer::Numeric(_) => "NUMERIC",
            ExtractedAnswer::Choice(_) => "CHOICE",
            ExtractedAnswer::Text(_) => "TEXT",
            ExtractedAnswer::Proven => "PROVEN",
            ExtractedAnswer::None => "NONE",
        }
    }

    pub fn value_string(&self) -> String {
        match self {
            ExtractedAnswer::Numeric(x) => x.to_string(),
            ExtractedAnswer::Choice(c) => c.to_string(),
            ExtractedAnswer::Text(t) => t.clone(),
            ExtractedAnswer::Proven => "proven".to_string(),
            ExtractedAnswer::None => String::new(),
        }
    }
}

/// One solver's attempt; the extracted answer always derives from the
/// full solution text via [`extract_answer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionAttempt {
    pub solver_role: SolverRole,
    pub full_solution: String,
    pub extracted: ExtractedAnswer,
}

impl SolutionAttempt {
    pub fn from_solution(solver_role: SolverRole, full_solution: String) -> SolutionAttempt {
        let extracted = extract_answer(&full_solution);
        SolutionAttempt {
            solver_role,
            full_solution,
            extracted,
        }
    }

    pub fn failed(solver_role: SolverRole) -> SolutionAttempt {
        SolutionAttempt {
            solver_role,
            full_solution: String::new(),
            extracted: ExtractedAnswer::None,
        }
    }
}

/// A retained problem: question, figure, the chosen solution, and both
/// attempts in provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub record_id: String,
    pub question: String,
    pub image_ref: String,
    pub chosen_solution: String,
    pub answer: ExtractedAnswer,
    pub provenance: ProblemProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemProvenance {
    pub seed_asset_id: Option<String>,
    pub pair_id: String,
    pub dialect: crate::modelgate::Dialect,
    pub specialist: SolutionAttempt,
    pub generalist: SolutionAttempt,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("empty response")]
    EmptyResponse,
    #[error("multiple questions in one response: {0}")]
    MultiQuestion(String),
    #[error(transparent)]
    Gate(#[from] GateError),
}

fn boxed_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\boxed\s*\{").expect("static regex compiles"))
}

/// Last `\boxed{...}` content, with balanced inner braces.
fn last_boxed(text: &str) -> Option<String> {
    let mut found = None;
    for m in boxed_re().find_iter(text) {
        let mut depth = 1usize;
        let rest = &text[m.end()..];
        for (i, c) in rest.char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        found = Some(rest[..i].to_string());
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    found
}

/// Text after the last final-answer marker, cut at end of line.
fn marker_answer(text: &str) -> Option<String> {
    let lower = text.to_lowercase();
    let markers = ["final answer is", "final answer:", "the answer is", "answer:"];
    let mut best: Option<usize> = None;
    let mut best_len = 0;
    for marker in markers {
        if let Some(pos) = lower.rfind(marker) {
            if best.is_none_or(|b| pos + marker.len() > b + best_len) {
                best = Some(pos);
                best_len = marker.len();
            }
        }
    }
    let pos = best?;
    let after = &text[pos + best_len..];
    let line = after.lines().next().unwrap_or("");
    let cleaned = line.trim().trim_end_matches('.').trim();
    (!cleaned.is_empty()).then(|| cleaned.to_string())
}

/// Trailing line that is a bare multiple-choice letter.
fn trailing_choice(text: &str) -> Option<char> {
    let line = text.lines().rev().find(|l| !l.trim().is_empty())?;
    let stripped: String = line
        .chars()
        .filter(|c| !c.is_whitespace() && !matches!(c, '(' | ')' | '.' | ':' | '*'))
        .collect();
    let mut chars = stripped.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.to_ascii_uppercase().is_ascii_uppercase() => {
            let upper = c.to_ascii_uppercase();
            ('A'..='E').contains(&upper).then_some(upper)
        }
        _ => None,
    }
}

fn frac_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\\d?frac\{([^{}]+)\}\{([^{}]+)\}").expect("static regex compiles")
    })
}

/// Parse a numeric answer: plain reals, fractions `a/b`, LaTeX `\frac`,
/// percentages, thousands separators.
pub fn parse_numeric(text: &str) -> Option<f64> {
    let mut t = text.trim().to_string();
    t = t.trim_matches('$').trim().to_string();
    t = frac_re().replace_all(&t, "($1)/($2)").into_owned();
    t = t.replace("\\%", "%").replace('\u{2212}', "-").replace(',', "");
    t = t.trim().to_string();

    if let Some(stripped) = t.strip_suffix('%') {
        return parse_numeric(stripped).map(|x| x / 100.0);
    }
    let unparen = t.trim_start_matches('(').trim_end_matches(')');
    if let Some((num, den)) = split_fraction(&t) {
        let n = parse_numeric(&num)?;
        let d = parse_numeric(&den)?;
        if d == 0.0 {
            return None;
        }
        return Some(n / d);
    }
    unparen.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Split on the top-level `/` of a fraction, respecting parentheses.
fn split_fraction(t: &str) -> Option<(String, String)> {
    let mut depth = 0i32;
    for (i, c) in t.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            '/' if depth == 0 && i > 0 => {
                return Some((t[..i].to_string(), t[i + 1..].to_string()));
            }
            _ => {}
        }
    }
    None
}

fn normalize_text_answer(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_end_matches('.')
        .to_string()
}

fn classify(candidate: &str) -> ExtractedAnswer {
    let trimmed = candidate.trim().trim_matches('$').trim();
    if trimmed.is_empty() {
        return ExtractedAnswer::None;
    }
    let norm = normalize_text_answer(trimmed);
    if norm == "proven" || norm.ends_with(" proven") {
        return ExtractedAnswer::Proven;
    }
    if let Some(x) = parse_numeric(trimmed) {
        return ExtractedAnswer::Numeric(x);
    }
    let mut chars = trimmed.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        let upper = c.to_ascii_uppercase();
        if ('A'..='E').contains(&upper) {
            return ExtractedAnswer::Choice(upper);
        }
    }
    ExtractedAnswer::Text(norm)
}

/// Extract the final answer from a written solution. Precedence: the last
/// boxed expression, then a final-answer marker line, then a trailing
/// standalone choice letter.
pub fn extract_answer(solution: &str) -> ExtractedAnswer {
    if let Some(boxed) = last_boxed(solution) {
        return classify(&boxed);
    }
    if let Some(marked) = marker_answer(solution) {
        return classify(&marked);
    }
    if let Some(choice) = trailing_choice(solution) {
        return ExtractedAnswer::Choice(choice);
    }
    ExtractedAnswer::None
}

/// Consistency predicate over two extracted answers. NONE never agrees;
/// kinds must match; numeric agreement is relative to
/// `tol * max(1, |x|, |y|)`.
pub fn answers_agree(a: &ExtractedAnswer, b: &ExtractedAnswer, tol: f64) -> bool {
    match (a, b) {
        (ExtractedAnswer::None, _) | (_, ExtractedAnswer::None) => false,
        (ExtractedAnswer::Numeric(x), ExtractedAnswer::Numeric(y)) => {
            (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0)
        }
        (ExtractedAnswer::Choice(x), ExtractedAnswer::Choice(y)) => x == y,
        (ExtractedAnswer::Text(x), ExtractedAnswer::Text(y)) => x == y,
        (ExtractedAnswer::Proven, ExtractedAnswer::Proven) => true,
        _ => false,
    }
}

/// Counters for the resynthesis funnel of one seed batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResynthStats {
    pub attempts: u64,
    pub no_code_block: u64,
    pub render_failures: u64,
    pub chain: ChainStats,
}

/// Regenerate figures from one seed at sampling temperature, render each
/// candidate, run the cleaning chain, and keep the passing pairs.
/// Per-attempt failures are counted, never fatal.
#[allow(clippy::too_many_arguments)]
pub fn resynthesize(
    asset: &ImageAsset,
    n_attempts: u32,
    dialect: crate::modelgate::Dialect,
    temperature: f64,
    gate: &ModelGate,
    endpoint_id: &str,
    renderer: &Renderer,
    filter_cfg: &FilterConfig,
    dedup: &DedupStore,
    images_dir: &std::path::Path,
    round_index: u32,
) -> (Vec<PairRecord>, ResynthStats) {
    let mut pairs = Vec::new();
    let mut stats = ResynthStats::default();
    for nonce in 0..n_attempts {
        stats.attempts += 1;
        let result =
            match gate.image_to_code(asset, dialect, temperature, endpoint_id, round_index, nonce) {
                Ok(r) => r,
                Err(_) => {
                    stats.no_code_block += 1;
                    continue;
                }
            };
        let code = match result.extracted_code {
            Some(code) => code,
            None => {
                stats.no_code_block += 1;
                continue;
            }
        };
        let outcome = match renderer.render(&renderer.job(code.clone())) {
            Ok(o) => o,
            Err(_) => {
                stats.render_failures += 1;
                continue;
            }
        };
        if outcome.status != RenderStatus::Success {
            stats.render_failures += 1;
            continue;
        }
        let image_stats = match pixel_stats_from_bytes(
            &outcome.image.as_ref().expect("success has image").png_bytes,
        ) {
            Ok(s) => s,
            Err(_) => {
                stats.render_failures += 1;
                continue;
            }
        };
        let chain = run_chain(&code, &image_stats, filter_cfg, dedup);
        stats.chain.record(&chain.verdict);
        if !chain.verdict.is_pass() {
            continue;
        }
        match assemble_pair(&code, &outcome, &chain.verdict, round_index, images_dir) {
            Ok(pair) => pairs.push(pair),
            Err(_) => stats.render_failures += 1,
        }
    }
    (pairs, stats)
}

fn multi_question_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\(\s*[a-z]\s*\)|\(\s*[ivx]+\s*\)|\b\d+\s*[.)]\s|[a-e][.)]\s")
            .expect("static regex compiles")
    })
}

/// Multiple question marks separated by enumeration markers indicate
/// sub-parts, which the prompt forbids.
fn has_sub_parts(text: &str) -> bool {
    let marks: Vec<usize> = text.match_indices('?').map(|(i, _)| i).collect();
    if marks.len() < 2 {
        return false;
    }
    marks
        .windows(2)
        .any(|w| multi_question_re().is_match(&text[w[0]..w[1]]))
}

/// Craft a question for a pair. The generator sees only the code (the
/// eventual reader sees only the image), so no image is attached.
pub fn craft_question(
    pair: &PairRecord,
    gate: &ModelGate,
    endpoint_id: &str,
) -> Result<SynthQuestion, SynthError> {
    let req = GenerationRequest::new(TemplateId::QuestionSynth, endpoint_id)
        .slot("dialect_name", pair.code.dialect.name())
        .slot("code", &pair.code.text);
    let result = gate.complete(&req)?;
    let mut text = result.raw_text.trim().to_string();
    for prefix in ["### Question:", "Question:"] {
        if let Some(stripped) = text.strip_prefix(prefix) {
            text = stripped.trim().to_string();
        }
    }
    if text.is_empty() {
        return Err(SynthError::EmptyResponse);
    }
    if has_sub_parts(&text) {
        return Err(SynthError::MultiQuestion(text));
    }
    let mut h = Sha256::new();
    h.update(pair.pair_id.as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    Ok(SynthQuestion {
        question_id: format!("q-{}", &hex::encode(h.finalize())[..16]),
        text,
        source_pair_id: pair.pair_id.clone(),
        dialect: pair.code.dialect,
    })
}

/// Ask both solver roles the same question with the same code context.
/// The two calls run concurrently; a failed role yields a NONE attempt.
pub fn solve_dual(
    question: &SynthQuestion,
    pair: &PairRecord,
    gate: &ModelGate,
    specialist_endpoint: &str,
    generalist_endpoint: &str,
    temperature: f64,
) -> (SolutionAttempt, SolutionAttempt) {
    let build = |endpoint: &str| {
        let mut req = GenerationRequest::new(TemplateId::Solve, endpoint)
            .slot("dialect_name", pair.code.dialect.name())
            .slot("code", &pair.code.text)
            .slot("question", &question.text);
        req.temperature = temperature;
        req
    };
    let specialist_req = build(specialist_endpoint);
    let generalist_req = build(generalist_endpoint);
    debug_assert_eq!(specialist_req.slots, generalist_req.slots);

    let (specialist, generalist) = std::thread::scope(|scope| {
        let s = scope.spawn(|| gate.complete(&specialist_req));
        let g = scope.spawn(|| gate.complete(&generalist_req));
        (s.join().expect("solver thread"), g.join().expect("solver thread"))
    });

    let to_attempt = |role: SolverRole, result: Result<crate::modelgate::GenerationResult, GateError>| {
        match result {
            Ok(r) => SolutionAttempt::from_solution(role, r.raw_text),
            Err(_) => SolutionAttempt::failed(role),
        }
    };
    (
        to_attempt(SolverRole::MathSpecialist, specialist),
        to_attempt(SolverRole::Generalist, generalist),
    )
}

/// Keep the sample iff the two attempts agree; the retained solution text
/// is the math specialist's.
pub fn accept_sample(
    question: &SynthQuestion,
    specialist: &SolutionAttempt,
    generalist: &SolutionAttempt,
    pair: &PairRecord,
    tol: f64,
) -> Option<ProblemRecord> {
    if !answers_agree(&specialist.extracted, &generalist.extracted, tol) {
        return None;
    }
    Some(ProblemRecord {
        record_id: format!("rec-{}", &question.question_id[2..]),
        question: question.text.clone(),
        image_ref: pair.image.storage_ref.to_string_lossy().into_owned(),
        chosen_solution: specialist.full_solution.clone(),
        answer: specialist.extracted.clone(),
        provenance: ProblemProvenance {
            seed_asset_id: pair.seed_asset_id.clone(),
            pair_id: pair.pair_id.clone(),
            dialect: pair.code.dialect,
            specialist: specialist.clone(),
            generalist: generalist.clone(),
        },
    })
}
