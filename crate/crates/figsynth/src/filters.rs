//! Cleaning and deduplication chain for rendered image-code pairs.
//!
//! Validity gating happens upstream in [`crate::render`]; this module holds
//! the rest of the chain: code deduplication after comment/whitespace
//! normalization, keyword filtering, length capping, and pixel-statistics
//! image filters, composed into an auditable short-circuiting chain.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ContentDigest;
use crate::modelgate::{CodeSample, Dialect};

/// Grayscale pixel statistics of a decoded image.
///
/// Pixels are converted to 8-bit luma (BT.601 weights, rounded to nearest)
/// before the mean and population standard deviation are taken, so the
/// statistics live on the familiar 0-255 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub mean: f64,
    pub std: f64,
    pub width_px: u32,
    pub height_px: u32,
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("image decode failure: {0}")]
    DecodeFailure(String),
    #[error("banlist read failure: {0}")]
    BanlistRead(#[from] std::io::Error),
}

/// Why a sample was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    Duplicate,
    Keyword,
    TooLong,
    Blank,
    NearWhite,
    BlackSquare,
    ForbiddenAccess,
}

impl RejectReason {
    pub const ALL: [RejectReason; 7] = [
        RejectReason::Duplicate,
        RejectReason::Keyword,
        RejectReason::TooLong,
        RejectReason::Blank,
        RejectReason::NearWhite,
        RejectReason::BlackSquare,
        RejectReason::ForbiddenAccess,
    ];
}

/// Outcome of one filter stage (or the whole chain): pass, or reject with
/// a reason and free-form detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FilterVerdict {
    Pass,
    Reject { reason: RejectReason, detail: String },
}

impl FilterVerdict {
    pub fn reject(reason: RejectReason, detail: impl Into<String>) -> FilterVerdict {
        FilterVerdict::Reject {
            reason,
            detail: detail.into(),
        }
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, FilterVerdict::Pass)
    }

    pub fn reason(&self) -> Option<RejectReason> {
        match self {
            FilterVerdict::Pass => None,
            FilterVerdict::Reject { reason, .. } => Some(*reason),
        }
    }
}

/// Thresholds for the cleaning chain. Only the blank threshold is fixed by
/// the rule it implements (std below five); the rest default to values
/// chosen here and are fully configurable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub max_code_chars: usize,
    pub banned_keywords: Vec<String>,
    pub blank_std_threshold: f64,
    pub near_white_mean_min: f64,
    pub near_white_std_max: f64,
    pub black_mean_max: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_code_chars: 8000,
            banned_keywords: default_banlist(),
            blank_std_threshold: 5.0,
            near_white_mean_min: 250.0,
            near_white_std_max: 10.0,
            black_mean_max: 5.0,
        }
    }
}

/// Built-in banlist targeting randomly generated content; shipped as an
/// editable file so deployments can extend it.
pub fn default_banlist() -> Vec<String> {
    parse_banlist(include_str!("../assets/banned_keywords.txt"))
}

/// Parse a banlist: one keyword per line, `#`-prefixed comments ignored.
pub fn parse_banlist(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn load_banlist(path: &Path) -> Result<Vec<String>, FilterError> {
    Ok(parse_banlist(&fs::read_to_string(path)?))
}

/// 8-bit luma of an RGB pixel (BT.601, rounded to nearest).
pub fn luma_u8(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Mean and population standard deviation over grayscale pixel values.
pub fn pixel_stats(img: &image::DynamicImage) -> PixelStats {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width(), rgb.height());
    let n = (w as u64 * h as u64) as f64;
    let mut sum = 0.0f64;
    for p in rgb.pixels() {
        sum += luma_u8(p[0], p[1], p[2]) as f64;
    }
    let mean = sum / n;
    let mut sq = 0.0f64;
    for p in rgb.pixels() {
        let d = luma_u8(p[0], p[1], p[2]) as f64 - mean;
        sq += d * d;
    }
    PixelStats {
        mean,
        std: (sq / n).sqrt(),
        width_px: w,
        height_px: h,
    }
}

pub fn pixel_stats_from_file(path: &Path) -> Result<PixelStats, FilterError> {
    let img = image::open(path).map_err(|e| FilterError::DecodeFailure(e.to_string()))?;
    Ok(pixel_stats(&img))
}

pub fn pixel_stats_from_bytes(bytes: &[u8]) -> Result<PixelStats, FilterError> {
    let img =
        image::load_from_memory(bytes).map_err(|e| FilterError::DecodeFailure(e.to_string()))?;
    Ok(pixel_stats(&img))
}

/// Reject almost-blank images: pixel std strictly below the threshold.
pub fn blank_filter(stats: &PixelStats, cfg: &FilterConfig) -> FilterVerdict {
    if stats.std < cfg.blank_std_threshold {
        FilterVerdict::reject(
            RejectReason::Blank,
            format!("std {:.4} < {}", stats.std, cfg.blank_std_threshold),
        )
    } else {
        FilterVerdict::Pass
    }
}

/// Reject near-white images (high mean, low dispersion) and black squares
/// (very low mean).
pub fn white_black_filter(stats: &PixelStats, cfg: &FilterConfig) -> FilterVerdict {
    if stats.mean >= cfg.near_white_mean_min && stats.std <= cfg.near_white_std_max {
        return FilterVerdict::reject(
            RejectReason::NearWhite,
            format!("mean {:.2}, std {:.2}", stats.mean, stats.std),
        );
    }
    if stats.mean <= cfg.black_mean_max {
        return FilterVerdict::reject(
            RejectReason::BlackSquare,
            format!("mean {:.2}", stats.mean),
        );
    }
    FilterVerdict::Pass
}

/// Canonical form of code for duplicate detection: comments stripped
/// (`%` lines for TikZ, `#` lines for plot scripts), whitespace runs
/// collapsed to a single space, trimmed. Case is preserved because
/// identifiers are case-significant.
pub fn normalize_code(code: &CodeSample) -> String {
    normalize_text(&code.text, code.dialect)
}

pub fn normalize_text(text: &str, dialect: Dialect) -> String {
    let comment_char = match dialect {
        Dialect::Tikz => '%',
        Dialect::PlotScript => '#',
    };
    let mut stripped = String::with_capacity(text.len());
    for line in text.lines() {
        let mut cut = line.len();
        let bytes = line.as_bytes();
        for (i, &b) in bytes.iter().enumerate() {
            if b == comment_char as u8 {
                // TikZ escapes a literal percent as \%.
                if dialect == Dialect::Tikz && i > 0 && bytes[i - 1] == b'\\' {
                    continue;
                }
                cut = i;
                break;
            }
        }
        stripped.push_str(&line[..cut]);
        stripped.push('\n');
    }
    let mut out = String::with_capacity(stripped.len());
    let mut in_ws = false;
    for ch in stripped.chars() {
        if ch.is_whitespace() {
            in_ws = true;
        } else {
            if in_ws && !out.is_empty() {
                out.push(' ');
            }
            in_ws = false;
            out.push(ch);
        }
    }
    out
}

/// Duplicate-elimination key: digest of the dialect plus the normalized code.
pub fn dedup_key(code: &CodeSample) -> ContentDigest {
    let normalized = normalize_code(code);
    let mut payload = Vec::with_capacity(normalized.len() + 16);
    payload.extend_from_slice(code.dialect.name().as_bytes());
    payload.push(0);
    payload.extend_from_slice(normalized.as_bytes());
    ContentDigest::sha256(&payload)
}

/// Shared set of seen dedup keys. Insertions are serialized; the first
/// writer of a key wins and later holders of the same key are duplicates.
#[derive(Default)]
pub struct DedupStore {
    seen: Mutex<HashSet<String>>,
}

impl DedupStore {
    pub fn new() -> DedupStore {
        DedupStore::default()
    }

    pub fn with_keys<I: IntoIterator<Item = String>>(keys: I) -> DedupStore {
        DedupStore {
            seen: Mutex::new(keys.into_iter().collect()),
        }
    }

    /// Insert a key; returns true if it was not seen before.
    pub fn insert(&self, key: &ContentDigest) -> bool {
        self.seen.lock().unwrap().insert(key.hex.clone())
    }

    pub fn contains(&self, key: &ContentDigest) -> bool {
        self.seen.lock().unwrap().contains(&key.hex)
    }

    pub fn keys(&self) -> Vec<String> {
        let mut v: Vec<String> = self.seen.lock().unwrap().iter().cloned().collect();
        v.sort();
        v
    }

    pub fn len(&self) -> usize {
        self.seen.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reject code containing any banned keyword as a substring of its
/// normalized text. Every matched keyword is recorded in the detail.
pub fn keyword_filter(code: &CodeSample, cfg: &FilterConfig) -> FilterVerdict {
    let normalized = normalize_code(code);
    let matched: Vec<&str> = cfg
        .banned_keywords
        .iter()
        .filter(|kw| normalized.contains(kw.as_str()))
        .map(String::as_str)
        .collect();
    if matched.is_empty() {
        FilterVerdict::Pass
    } else {
        FilterVerdict::reject(RejectReason::Keyword, matched.join(", "))
    }
}

/// Reject code whose raw character count exceeds the cap (exactly at the
/// cap still passes).
pub fn length_filter(code: &CodeSample, cfg: &FilterConfig) -> FilterVerdict {
    let chars = code.text.chars().count();
    if chars > cfg.max_code_chars {
        FilterVerdict::reject(
            RejectReason::TooLong,
            format!("{chars} chars > cap {}", cfg.max_code_chars),
        )
    } else {
        FilterVerdict::Pass
    }
}

/// One audited stage evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub code_id: String,
    pub stage: String,
    pub decision: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

fn audit(code_id: &str, stage: &str, verdict: &FilterVerdict) -> AuditEntry {
    match verdict {
        FilterVerdict::Pass => AuditEntry {
            code_id: code_id.to_string(),
            stage: stage.to_string(),
            decision: "PASS".to_string(),
            reason: None,
            detail: None,
        },
        FilterVerdict::Reject { reason, detail } => AuditEntry {
            code_id: code_id.to_string(),
            stage: stage.to_string(),
            decision: "REJECT".to_string(),
            reason: Some(*reason),
            detail: Some(detail.clone()),
        },
    }
}

/// Result of running the full chain on one sample.
#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub verdict: FilterVerdict,
    pub trail: Vec<AuditEntry>,
}

/// Run the cleaning chain on a successfully rendered sample, in order:
/// dedup, keyword, length, blank, near-white/black. The first rejection
/// short-circuits; the trail lists every stage that was evaluated.
pub fn run_chain(
    code: &CodeSample,
    image_stats: &PixelStats,
    cfg: &FilterConfig,
    dedup: &DedupStore,
) -> ChainOutcome {
    let mut trail = Vec::with_capacity(5);
    let id = &code.code_id;

    let key = dedup_key(code);
    let dedup_verdict = if dedup.insert(&key) {
        FilterVerdict::Pass
    } else {
        FilterVerdict::reject(RejectReason::Duplicate, format!("key {}", key.short()))
    };
    trail.push(audit(id, "dedup", &dedup_verdict));
    if !dedup_verdict.is_pass() {
        return ChainOutcome {
            verdict: dedup_verdict,
            trail,
        };
    }

    let stages: [(&str, FilterVerdict); 4] = [
        ("keyword", keyword_filter(code, cfg)),
        ("length", length_filter(code, cfg)),
        ("blank", blank_filter(image_stats, cfg)),
        ("white_black", white_black_filter(image_stats, cfg)),
    ];
    for (name, verdict) in stages {
        trail.push(audit(id, name, &verdict));
        if !verdict.is_pass() {
            return ChainOutcome { verdict, trail };
        }
    }
    ChainOutcome {
        verdict: FilterVerdict::Pass,
        trail,
    }
}

/// Per-reason reject counts plus passes; conservation over any input
/// sequence: inputs == pass + sum of rejects.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub inputs: u64,
    pub passed: u64,
    pub rejects: Vec<(RejectReason, u64)>,
}

impl ChainStats {
    pub fn record(&mut self, verdict: &FilterVerdict) {
        self.inputs += 1;
        match verdict.reason() {
            None => self.passed += 1,
            Some(reason) => {
                if let Some(slot) = self.rejects.iter_mut().find(|(r, _)| *r == reason) {
                    slot.1 += 1;
                } else {
                    self.rejects.push((reason, 1));
                }
            }
        }
    }

    pub fn rejected(&self, reason: RejectReason) -> u64 {
        self.rejects
            .iter()
            .find(|(r, _)| *r == reason)
            .map(|(_, n)| *n)
            .unwrap_or(0)
    }

    pub fn total_rejected(&self) -> u64 {
        self.rejects.iter().map(|(_, n)| n).sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.inputs == self.passed + self.total_rejected()
    }
}

/// Append audit entries to a newline-delimited JSON trail.
pub fn write_audit_trail<W: std::io::Write>(
    out: &mut W,
    entries: &[AuditEntry],
) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
