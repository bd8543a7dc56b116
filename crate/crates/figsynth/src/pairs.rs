//! Assembly of validated image-code pairs into training samples and
//! dataset files.
//!
//! A pair links generated code to the image rendered from exactly that
//! code. Pairs become prompt/response training samples in the dialect's
//! prompt format and are written as newline-delimited JSON with a manifest,
//! atomically, with holdout-leakage guarding on the dedup key.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::ImageAsset;
use crate::filters::{dedup_key, FilterVerdict, RejectReason};
use crate::modelgate::{
    extract_code_block, response_lead_in, template, CodeSample, Dialect, TemplateId,
};
use crate::render::{RenderOutcome, RenderStatus};

/// A validated image-code pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub code: CodeSample,
    pub image: ImageAsset,
    pub round_index: u32,
    pub seed_asset_id: Option<String>,
}

/// One formatted training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub prompt_text: String,
    pub response_text: String,
    pub image_ref: String,
    pub dialect: Dialect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Holdout,
}

/// Manifest of one emitted dataset file set; counts are verified against
/// what was actually written before the manifest is finalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub record_count: u64,
    pub tikz_count: u64,
    pub plot_count: u64,
    pub config_digest: String,
    pub output_files: Vec<String>,
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub pair_id: String,
    pub dialect: Dialect,
    pub prompt: String,
    pub response: String,
    pub image_file: String,
    pub round: u32,
    pub seed_asset_id: Option<String>,
}

#[derive(Debug, Error)]
pub enum PairError {
    #[error("precondition violation: {0}")]
    PreconditionViolation(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("count mismatch: manifest says {expected}, file has {actual}")]
    CountMismatch { expected: u64, actual: u64 },
}

/// Deterministic pair id from the code content and the round.
pub fn pair_id(code: &CodeSample, round_index: u32) -> String {
    let mut h = Sha256::new();
    h.update(code.dialect.tag().as_bytes());
    h.update([0]);
    h.update(code.text.as_bytes());
    format!("pair-{round_index}-{}", &hex::encode(h.finalize())[..16])
}

/// Build a pair from a chain-passing render success, persisting the
/// rendered image as a digest-named PNG under `images_dir`.
pub fn assemble_pair(
    code: &CodeSample,
    outcome: &RenderOutcome,
    verdict: &FilterVerdict,
    round_index: u32,
    images_dir: &Path,
) -> Result<PairRecord, PairError> {
    if outcome.status != RenderStatus::Success {
        return Err(PairError::PreconditionViolation(format!(
            "render status {:?} is not SUCCESS",
            outcome.status
        )));
    }
    if !verdict.is_pass() {
        return Err(PairError::PreconditionViolation(
            "chain verdict is not PASS".to_string(),
        ));
    }
    if outcome.code_id != code.code_id {
        return Err(PairError::PreconditionViolation(format!(
            "outcome {} was not rendered from code {}",
            outcome.code_id, code.code_id
        )));
    }
    let rendered = outcome
        .image
        .as_ref()
        .expect("SUCCESS outcome carries an image");

    fs::create_dir_all(images_dir)?;
    let file_name = format!("{}.png", rendered.digest.hex);
    let target = images_dir.join(&file_name);
    if !target.exists() {
        write_atomic(&target, &rendered.png_bytes)?;
    }

    Ok(PairRecord {
        pair_id: pair_id(code, round_index),
        code: code.clone(),
        image: rendered.to_asset(target),
        round_index,
        seed_asset_id: code.provenance.seed_asset_id.clone(),
    })
}

/// Format a pair in its dialect's prompt format: the image-to-code prompt
/// as the prompt (with the literal `<image>` placeholder), the fixed
/// lead-in line plus fenced code as the response.
pub fn format_training_sample(pair: &PairRecord) -> TrainingSample {
    let template_id = match pair.code.dialect {
        Dialect::Tikz => TemplateId::Img2Tikz,
        Dialect::PlotScript => TemplateId::Img2Plot,
    };
    let prompt_text = template(template_id).user_text.to_string();
    let response_text = format!(
        "{}\n```{}\n{}\n```",
        response_lead_in(pair.code.dialect),
        pair.code.dialect.primary_fence_label(),
        pair.code.text
    );
    TrainingSample {
        prompt_text,
        response_text,
        image_ref: pair.image.storage_ref.to_string_lossy().into_owned(),
        dialect: pair.code.dialect,
    }
}

/// Exact-key holdout guard: a pair whose dedup key appears in the
/// protected set is rejected as a duplicate.
pub fn holdout_guard(pair: &PairRecord, holdout_keys: &HashSet<String>) -> FilterVerdict {
    let key = dedup_key(&pair.code);
    if holdout_keys.contains(&key.hex) {
        FilterVerdict::reject(RejectReason::Duplicate, format!("holdout key {}", key.short()))
    } else {
        FilterVerdict::Pass
    }
}

/// Load a holdout key set: one dedup-key hex per line, `#` comments.
pub fn load_holdout_keys(path: &Path) -> Result<HashSet<String>, PairError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Emission order of dataset records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum EmitOrder {
    /// Sorted by a hash of the pair id: deterministic and dialect-interleaved.
    #[default]
    Hash,
    /// As given by the caller.
    Input,
}


fn emission_sort_key(record: &DatasetRecord) -> String {
    hex::encode(Sha256::digest(record.pair_id.as_bytes()))
}

pub fn to_dataset_record(pair: &PairRecord, dataset_dir: &Path) -> DatasetRecord {
    let sample = format_training_sample(pair);
    let image_file = pair
        .image
        .storage_ref
        .strip_prefix(dataset_dir)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| pair.image.storage_ref.to_string_lossy().into_owned());
    DatasetRecord {
        pair_id: pair.pair_id.clone(),
        dialect: pair.code.dialect,
        prompt: sample.prompt_text,
        response: sample.response_text,
        image_file,
        round: pair.round_index,
        seed_asset_id: pair.seed_asset_id.clone(),
    }
}

/// Write the dataset file and its manifest under `dataset_dir`, atomically
/// (temp file then rename), verifying manifest counts against the lines
/// actually written.
pub fn write_dataset(
    pairs: &[PairRecord],
    name: &str,
    split: Split,
    config_digest: &str,
    dataset_dir: &Path,
    order: EmitOrder,
) -> Result<DatasetManifest, PairError> {
    fs::create_dir_all(dataset_dir)?;
    let mut records: Vec<DatasetRecord> =
        pairs.iter().map(|p| to_dataset_record(p, dataset_dir)).collect();
    if order == EmitOrder::Hash {
        records.sort_by_key(emission_sort_key);
    }

    let dataset_file = format!("{name}.jsonl");
    let dataset_path = dataset_dir.join(&dataset_file);
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    write_atomic(&dataset_path, &buf)?;

    let actual = BufReader::new(File::open(&dataset_path)?)
        .lines()
        .count() as u64;
    let expected = records.len() as u64;
    if actual != expected {
        return Err(PairError::CountMismatch { expected, actual });
    }

    let manifest = DatasetManifest {
        name: name.to_string(),
        split,
        record_count: expected,
        tikz_count: records.iter().filter(|r| r.dialect == Dialect::Tikz).count() as u64,
        plot_count: records
            .iter()
            .filter(|r| r.dialect == Dialect::PlotScript)
            .count() as u64,
        config_digest: config_digest.to_string(),
        output_files: vec![dataset_file],
    };
    let manifest_path = dataset_dir.join(format!("{name}.manifest.json"));
    let manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, &manifest_bytes)?;
    Ok(manifest)
}

/// Read a dataset file back into records.
pub fn read_dataset_records(path: &Path) -> Result<Vec<DatasetRecord>, PairError> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| {
            PairError::PreconditionViolation(format!("malformed dataset record: {e}"))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write bytes to a temp file in the target's directory, fsync, rename.
/// An interrupted write never leaves a partially visible final file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Extract the code back out of a formatted response (the inverse of
/// [`format_training_sample`]'s response formatting).
pub fn extract_response_code(response_text: &str, dialect: Dialect) -> Option<String> {
    extract_code_block(response_text, dialect)
}
