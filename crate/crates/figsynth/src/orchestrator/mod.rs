//! End-to-end pipeline drivers: iterative image-to-code rounds, the
//! TikZ-to-plot translation pass, problem synthesis, K12 processing, and
//! reporting.
//!
//! Every pass runs as a checkpointed work list: selection is persisted,
//! work proceeds in chunks with durable staging between chunks, and
//! finalization sorts records by hash before an atomic write. A resumed
//! pass therefore produces byte-identical output to an uninterrupted one.
//! Model retraining between rounds is external: each round exports its
//! corpus and the next round simply points at a new endpoint id.

mod checkpoint;
mod config;

pub use checkpoint::{CheckpointStore, PipelineState, WorkUnit};
pub use config::{
    DialectMix, K12Settings, OcrSettings, PathsConfig, PipelineConfig, PostFilterConfig, RoleMap,
    RoundSettings, SynthSettings,
};

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Catalog, ContentDigest};
use crate::filters::{
    pixel_stats_from_bytes, run_chain, ChainStats, DedupStore, FilterVerdict, RejectReason,
};
use crate::k12::{
    admit_problem, augment, ocr_equations, partition_problem_images, read_problems,
    write_processed, HttpOcr, K12Error, OcrClient, ProcessedProblem, StubOcr,
};
use crate::modelgate::{CodeSample, Dialect, ModelGate, Provenance};
use crate::pairs::{
    assemble_pair, extract_response_code, holdout_guard, load_holdout_keys, read_dataset_records,
    write_atomic, write_dataset, DatasetManifest, PairRecord, Split,
};
use crate::render::{RenderOutcome, RenderStatus, Renderer, SuccessRate};
use crate::synth::{
    accept_sample, craft_question, solve_dual, ProblemRecord, SolutionAttempt, SynthQuestion,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("checkpoint io failure: {0}")]
    CheckpointIo(String),
    #[error("catalog empty for the selected sources")]
    CatalogEmpty,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sandbox setup failure: {0}")]
    Sandbox(String),
    #[error("resume config digest {found} does not match checkpoint {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("aborted at stage boundary")]
    Aborted,
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-pass statistics; conservation holds at every stage boundary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub kind: String,
    pub round_index: u32,
    pub attempted: u64,
    pub generation_failures: u64,
    pub render: SuccessRate,
    pub render_failures: Vec<(RenderStatus, u64)>,
    pub chain: ChainStats,
    pub holdout_rejects: u64,
    pub pairs_emitted: u64,
    pub questions_crafted: u64,
    pub question_failures: u64,
    pub solved: u64,
    pub accepted: u64,
    pub post_filter_rejects: u64,
    pub problems_emitted: u64,
    pub wall_ms: u64,
}

impl RoundStats {
    fn new(kind: &str, round_index: u32) -> RoundStats {
        RoundStats {
            kind: kind.to_string(),
            round_index,
            ..RoundStats::default()
        }
    }

    fn record_render(&mut self, outcome: &RenderOutcome) {
        self.render.total += 1;
        let ok = outcome.status == RenderStatus::Success;
        match outcome.dialect {
            Dialect::Tikz => {
                self.render.tikz_total += 1;
                if ok {
                    self.render.tikz_successes += 1;
                }
            }
            Dialect::PlotScript => {
                self.render.plot_total += 1;
                if ok {
                    self.render.plot_successes += 1;
                }
            }
        }
        if ok {
            self.render.successes += 1;
        } else if let Some(slot) = self
            .render_failures
            .iter_mut()
            .find(|(s, _)| *s == outcome.status)
        {
            slot.1 += 1;
        } else {
            self.render_failures.push((outcome.status, 1));
        }
    }

    pub fn solution_pass_rate(&self) -> Option<f64> {
        (self.solved > 0).then(|| self.accepted as f64 / self.solved as f64)
    }

    /// inputs = outputs + rejects + failures, at every boundary.
    pub fn is_conserved(&self) -> bool {
        let render_fail: u64 = self.render_failures.iter().map(|(_, n)| n).sum();
        self.attempted == self.generation_failures + self.render.total
            && self.render.total == self.render.successes + render_fail
            && self.chain.inputs == self.render.successes
            && self.chain.is_conserved()
            && self.pairs_emitted + self.holdout_rejects == self.chain.passed
    }
}

/// What a stage-boundary hook tells the driver to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    Abort,
}

/// Called at every checkpointed boundary with (stage, completed units).
pub type StageHook<'a> = dyn FnMut(&str, usize) -> HookAction + 'a;

fn no_hook(_: &str, _: usize) -> HookAction {
    HookAction::Continue
}

/// Deterministic work order: hash of the seed and the unit's digest.
fn order_key(seed: u64, discriminant: &str) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(discriminant.as_bytes());
    h.finalize().into()
}

/// Order-preserving bounded parallel map.
fn parallel_map<T: Send, R: Send>(
    items: Vec<T>,
    width: usize,
    f: impl Fn(T) -> R + Sync,
) -> Vec<R> {
    let width = width.max(1);
    let total = items.len();
    if total == 0 {
        return Vec::new();
    }
    let mut slots: Vec<Option<R>> = Vec::new();
    slots.resize_with(total, || None);
    let (job_tx, job_rx) = crossbeam_channel::unbounded::<(usize, T)>();
    let (out_tx, out_rx) = crossbeam_channel::unbounded::<(usize, R)>();
    for item in items.into_iter().enumerate() {
        job_tx.send(item).expect("queue open");
    }
    drop(job_tx);
    std::thread::scope(|scope| {
        for _ in 0..width.min(total) {
            let job_rx = job_rx.clone();
            let out_tx = out_tx.clone();
            let f = &f;
            scope.spawn(move || {
                while let Ok((idx, item)) = job_rx.recv() {
                    if out_tx.send((idx, f(item))).is_err() {
                        break;
                    }
                }
            });
        }
        drop(out_tx);
        for (idx, result) in out_rx {
            slots[idx] = Some(result);
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every item mapped"))
        .collect()
}

fn append_audit(dir: &Path, entries: &[crate::filters::AuditEntry]) -> Result<(), OrchestratorError> {
    if entries.is_empty() {
        return Ok(());
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("audit.jsonl"))
        .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
    let mut buf = Vec::new();
    crate::filters::write_audit_trail(&mut buf, entries)
        .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
    file.write_all(&buf)
        .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))
}

fn write_stats(dir: &Path, stats: &RoundStats) -> Result<(), OrchestratorError> {
    let bytes = serde_json::to_vec_pretty(stats).expect("stats serialize");
    write_atomic(&dir.join("stats.json"), &bytes)
        .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))
}

fn read_stats(dir: &Path) -> Result<RoundStats, OrchestratorError> {
    let text = std::fs::read_to_string(dir.join("stats.json"))?;
    serde_json::from_str(&text).map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))
}

fn load_holdout(cfg: &PipelineConfig) -> Result<HashSet<String>, OrchestratorError> {
    match &cfg.paths.holdout_keys {
        Some(path) if path.exists() => {
            load_holdout_keys(path).map_err(|e| OrchestratorError::Config(e.to_string()))
        }
        _ => Ok(HashSet::new()),
    }
}

enum ItemOutput {
    GenFailed,
    Setup(String),
    Rendered(Box<(CodeSample, RenderOutcome)>),
}

/// One model-in-the-loop round: select seeds, generate code, precheck,
/// render, clean, assemble, emit the dataset.
pub fn run_round(cfg: &PipelineConfig) -> Result<RoundStats, OrchestratorError> {
    run_round_with_hook(cfg, &mut no_hook)
}

pub fn run_round_with_hook(
    cfg: &PipelineConfig,
    hook: &mut StageHook,
) -> Result<RoundStats, OrchestratorError> {
    let started = Instant::now();
    let round_dir = cfg
        .paths
        .output_dir
        .join(format!("round_{}", cfg.round.round_index));
    let store = CheckpointStore::new(&round_dir)?;
    if store.is_complete() {
        return read_stats(&round_dir);
    }
    let config_digest = cfg.digest();
    let catalog = Catalog::open(&cfg.paths.catalog)
        .map_err(|e| OrchestratorError::Config(e.to_string()))?;
    let gate = ModelGate::new(cfg.endpoints.clone());
    let renderer = Renderer::new(cfg.render.clone());
    let holdout = load_holdout(cfg)?;

    let mut state = match store.load_state() {
        Some(s) => {
            if s.config_digest != config_digest {
                return Err(OrchestratorError::ConfigMismatch {
                    expected: s.config_digest,
                    found: config_digest,
                });
            }
            s
        }
        None => {
            let assets = catalog.assets(Some(&cfg.round.sources));
            if assets.is_empty() {
                return Err(OrchestratorError::CatalogEmpty);
            }
            let mut keyed: Vec<([u8; 32], WorkUnit)> = assets
                .iter()
                .map(|a| {
                    (
                        order_key(cfg.seed, &a.digest.hex),
                        WorkUnit {
                            id: a.asset_id.clone(),
                            dialect: cfg.round.dialect_mix.assign(&a.digest.hex),
                        },
                    )
                })
                .collect();
            keyed.sort_by_key(|x| x.0);
            let mut work_list: Vec<WorkUnit> = keyed.into_iter().map(|(_, u)| u).collect();
            if let Some(cap) = cfg.round.sample_cap {
                work_list.truncate(cap);
            }
            let state = PipelineState {
                kind: "round".to_string(),
                round_index: cfg.round.round_index,
                stage: "selected".to_string(),
                work_list,
                completed: 0,
                stats: RoundStats::new("round", cfg.round.round_index),
                config_digest: config_digest.clone(),
                aux: Default::default(),
            };
            store.save_state(&state)?;
            state
        }
    };
    if hook("select", state.completed) == HookAction::Abort {
        return Err(OrchestratorError::Aborted);
    }

    let dedup = store.load_dedup("codes");
    let images_dir = round_dir.join("images");

    while state.completed < state.work_list.len() {
        let chunk_end = (state.completed + cfg.checkpoint_every).min(state.work_list.len());
        let chunk = state.work_list[state.completed..chunk_end].to_vec();

        let results = parallel_map(chunk, cfg.round.pool_width, |unit| {
            let asset = match catalog.find_asset(&unit.id) {
                Some(a) => a,
                None => return ItemOutput::GenFailed,
            };
            let generated = match gate.image_to_code(
                &asset,
                unit.dialect,
                cfg.round.temperature,
                &cfg.roles.image_to_code,
                cfg.round.round_index,
                0,
            ) {
                Ok(g) => g,
                Err(_) => return ItemOutput::GenFailed,
            };
            let code = match generated.extracted_code {
                Some(c) => c,
                None => return ItemOutput::GenFailed,
            };
            match renderer.render(&renderer.job(code.clone())) {
                Ok(outcome) => ItemOutput::Rendered(Box::new((code, outcome))),
                Err(e) => ItemOutput::Setup(e.to_string()),
            }
        });

        // Filter decisions run serially in work order so dedup outcomes do
        // not depend on thread scheduling.
        let mut staged = Vec::new();
        let mut audit = Vec::new();
        for result in results {
            state.stats.attempted += 1;
            match result {
                ItemOutput::Setup(e) => return Err(OrchestratorError::Sandbox(e)),
                ItemOutput::GenFailed => state.stats.generation_failures += 1,
                ItemOutput::Rendered(rendered) => {
                    let (code, outcome) = *rendered;
                    state.stats.record_render(&outcome);
                    if outcome.status != RenderStatus::Success {
                        continue;
                    }
                    let image = outcome.image.as_ref().expect("success carries image");
                    let stats = match pixel_stats_from_bytes(&image.png_bytes) {
                        Ok(s) => s,
                        Err(_) => continue,
                    };
                    let chain = run_chain(&code, &stats, &cfg.filters, &dedup);
                    audit.extend(chain.trail.iter().cloned());
                    state.stats.chain.record(&chain.verdict);
                    if !chain.verdict.is_pass() {
                        continue;
                    }
                    let pair = assemble_pair(
                        &code,
                        &outcome,
                        &chain.verdict,
                        cfg.round.round_index,
                        &images_dir,
                    )
                    .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
                    if holdout_guard(&pair, &holdout).is_pass() {
                        state.stats.pairs_emitted += 1;
                        staged.push(pair);
                    } else {
                        state.stats.holdout_rejects += 1;
                    }
                }
            }
        }
        store.append_staging(&staged)?;
        append_audit(&round_dir, &audit)?;
        store.save_dedup("codes", &dedup)?;
        state.completed = chunk_end;
        state.stage = "chunk".to_string();
        store.save_state(&state)?;
        if hook("chunk", state.completed) == HookAction::Abort {
            return Err(OrchestratorError::Aborted);
        }
    }

    if hook("finalize", state.completed) == HookAction::Abort {
        return Err(OrchestratorError::Aborted);
    }
    let pairs: Vec<PairRecord> = store.load_staging()?;
    write_dataset(
        &pairs,
        "dataset",
        Split::Train,
        &state.config_digest,
        &round_dir,
        cfg.emit_order,
    )
    .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
    state.stats.wall_ms += started.elapsed().as_millis() as u64;
    write_stats(&round_dir, &state.stats)?;
    state.stage = "complete".to_string();
    store.save_state(&state)?;
    Ok(state.stats)
}

/// Translate an emitted TikZ dataset into plot-script pairs, linking each
/// new pair to its ancestor.
pub fn run_translation_pass(
    cfg: &PipelineConfig,
    source_dir: &Path,
) -> Result<RoundStats, OrchestratorError> {
    run_translation_pass_with_hook(cfg, source_dir, &mut no_hook)
}

pub fn run_translation_pass_with_hook(
    cfg: &PipelineConfig,
    source_dir: &Path,
    hook: &mut StageHook,
) -> Result<RoundStats, OrchestratorError> {
    let started = Instant::now();
    let pass_dir = cfg
        .paths
        .output_dir
        .join(format!("translate_{}", cfg.round.round_index));
    let store = CheckpointStore::new(&pass_dir)?;
    if store.is_complete() {
        return read_stats(&pass_dir);
    }
    let config_digest = cfg.digest();
    let dataset_path = source_dir.join("dataset.jsonl");
    if !dataset_path.exists() {
        return Err(OrchestratorError::MissingInput(format!(
            "{} not found",
            dataset_path.display()
        )));
    }
    let records = read_dataset_records(&dataset_path)
        .map_err(|e| OrchestratorError::Config(e.to_string()))?;
    // Rebuild the TikZ code samples exactly as they were generated.
    let mut sources: std::collections::BTreeMap<String, CodeSample> = Default::default();
    for r in &records {
        if r.dialect != Dialect::Tikz {
            continue;
        }
        let text = match extract_response_code(&r.response, Dialect::Tikz) {
            Some(t) => t,
            None => continue,
        };
        let code = CodeSample::new(
            Dialect::Tikz,
            text,
            Provenance {
                seed_asset_id: r.seed_asset_id.clone(),
                round_index: r.round,
                endpoint_id: String::new(),
                temperature: 0.0,
                ancestor_code_id: None,
            },
        );
        sources.insert(r.pair_id.clone(), code);
    }

    let gate = ModelGate::new(cfg.endpoints.clone());
    let renderer = Renderer::new(cfg.render.clone());
    let holdout = load_holdout(cfg)?;

    let mut state = match store.load_state() {
        Some(s) => {
            if s.config_digest != config_digest {
                return Err(OrchestratorError::ConfigMismatch {
                    expected: s.config_digest,
                    found: config_digest,
                });
            }
            s
        }
        None => {
            let mut keyed: Vec<([u8; 32], WorkUnit)> = sources
                .keys()
                .map(|pair_id| {
                    (
                        order_key(cfg.seed, pair_id),
                        WorkUnit {
                            id: pair_id.clone(),
                            dialect: Dialect::PlotScript,
                        },
                    )
                })
                .collect();
            keyed.sort_by_key(|x| x.0);
            let state = PipelineState {
                kind: "translate".to_string(),
                round_index: cfg.round.round_index,
                stage: "selected".to_string(),
                work_list: keyed.into_iter().map(|(_, u)| u).collect(),
                completed: 0,
                stats: RoundStats::new("translate", cfg.round.round_index),
                config_digest: config_digest.clone(),
                aux: [(
                    "source_dir".to_string(),
                    source_dir.to_string_lossy().into_owned(),
                )]
                .into(),
            };
            store.save_state(&state)?;
            state
        }
    };
    if hook("select", state.completed) == HookAction::Abort {
        return Err(OrchestratorError::Aborted);
    }

    let dedup = store.load_dedup("codes");
    let images_dir = pass_dir.join("images");

    while state.completed < state.work_list.len() {
        let chunk_end = (state.completed + cfg.checkpoint_every).min(state.work_list.len());
        let chunk = state.work_list[state.completed..chunk_end].to_vec();
        let results = parallel_map(chunk, cfg.round.pool_width, |unit| {
            let source = match sources.get(&unit.id) {
                Some(s) => s,
                None => return ItemOutput::GenFailed,
            };
            let translated = match gate.translate_code(source, &cfg.roles.translator) {
                Ok(t) => t,
                Err(_) => return ItemOutput::GenFailed,
            };
            let code = match translated.extracted_code {
                Some(c) => c,
                None => return ItemOutput::GenFailed,
            };
            match renderer.render(&renderer.job(code.clone())) {
                Ok(outcome) => ItemOutput::Rendered(Box::new((code, outcome))),
                Err(e) => ItemOutput::Setup(e.to_string()),
            }
        });

        let mut staged = Vec::new();
        let mut audit = Vec::new();
        for result in results {
            state.stats.attempted += 1;
            match result {
                ItemOutput::Setup(e) => return Err(OrchestratorError::Sandbox(e)),
                ItemOutput::GenFailed => state.stats.generation_failures += 1,
                ItemOutput::Rendered(rendered) => {
                    let (code, outcome) = *rendered;
                    state.stats.record_render(&outcome);
                    if outcome.status != RenderStatus::Success {
                        continue;
                    }
                    let image = outcome.image.as_ref().expect("success carries image");
                    let stats = match pixel_stats_from_bytes(&image.png_bytes) {
                        Ok(s) => s,
                        Err(_) => continue,
                    };
                    let chain = run_chain(&code, &stats, &cfg.filters, &dedup);
                    audit.extend(chain.trail.iter().cloned());
                    state.stats.chain.record(&chain.verdict);
                    if !chain.verdict.is_pass() {
                        continue;
                    }
                    let pair = assemble_pair(
                        &code,
                        &outcome,
                        &chain.verdict,
                        cfg.round.round_index,
                        &images_dir,
                    )
                    .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
                    if holdout_guard(&pair, &holdout).is_pass() {
                        state.stats.pairs_emitted += 1;
                        staged.push(pair);
                    } else {
                        state.stats.holdout_rejects += 1;
                    }
                }
            }
        }
        store.append_staging(&staged)?;
        append_audit(&pass_dir, &audit)?;
        store.save_dedup("codes", &dedup)?;
        state.completed = chunk_end;
        state.stage = "chunk".to_string();
        store.save_state(&state)?;
        if hook("chunk", state.completed) == HookAction::Abort {
            return Err(OrchestratorError::Aborted);
        }
    }

    if hook("finalize", state.completed) == HookAction::Abort {
        return Err(OrchestratorError::Aborted);
    }
    let pairs: Vec<PairRecord> = store.load_staging()?;
    write_dataset(
        &pairs,
        "dataset",
        Split::Train,
        &state.config_digest,
        &pass_dir,
        cfg.emit_order,
    )
    .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
    state.stats.wall_ms += started.elapsed().as_millis() as u64;
    write_stats(&pass_dir, &state.stats)?;
    state.stage = "complete".to_string();
    store.save_state(&state)?;
    Ok(state.stats)
}

/// Output record of problem synthesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemOut {
    pub record_id: String,
    pub question: String,
    pub image_file: String,
    pub solution: String,
    pub answer_kind: String,
    pub answer_value: String,
    pub provenance: crate::synth::ProblemProvenance,
}

fn problem_out(record: &ProblemRecord, base_dir: &Path) -> ProblemOut {
    let image_file = Path::new(&record.image_ref)
        .strip_prefix(base_dir)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| record.image_ref.clone());
    ProblemOut {
        record_id: record.record_id.clone(),
        question: record.question.clone(),
        image_file,
        solution: record.chosen_solution.clone(),
        answer_kind: record.answer.kind_name().to_string(),
        answer_value: record.answer.value_string(),
        provenance: record.provenance.clone(),
    }
}

/// Dedup-plus-length post-filter over accepted problem records.
fn post_filter(
    record: &ProblemRecord,
    cfg: &PostFilterConfig,
    store: &DedupStore,
) -> FilterVerdict {
    let text = format!("{}\n{}", record.question, record.chosen_solution);
    let key = ContentDigest::sha256(text.as_bytes());
    if !store.insert(&key) {
        return FilterVerdict::reject(RejectReason::Duplicate, format!("key {}", key.short()));
    }
    let chars = text.chars().count();
    if chars > cfg.max_record_chars {
        return FilterVerdict::reject(
            RejectReason::TooLong,
            format!("{chars} chars > cap {}", cfg.max_record_chars),
        );
    }
    FilterVerdict::Pass
}

/// Figure resynthesis, question crafting, dual solving, and the
/// answer-consistency gate, end to end over the selected seeds.
pub fn run_problem_synthesis(cfg: &PipelineConfig) -> Result<RoundStats, OrchestratorError> {
    run_problem_synthesis_with_hook(cfg, &mut no_hook)
}

pub fn run_problem_synthesis_with_hook(
    cfg: &PipelineConfig,
    hook: &mut StageHook,
) -> Result<RoundStats, OrchestratorError> {
    let started = Instant::now();
    let pass_dir = cfg
        .paths
        .output_dir
        .join(format!("synth_{}", cfg.round.round_index));
    let store = CheckpointStore::new(&pass_dir)?;
    if store.is_complete() {
        return read_stats(&pass_dir);
    }
    let config_digest = cfg.digest();
    let catalog = Catalog::open(&cfg.paths.catalog)
        .map_err(|e| OrchestratorError::Config(e.to_string()))?;
    let gate = ModelGate::new(cfg.endpoints.clone());
    let renderer = Renderer::new(cfg.render.clone());

    let mut state = match store.load_state() {
        Some(s) => {
            if s.config_digest != config_digest {
                return Err(OrchestratorError::ConfigMismatch {
                    expected: s.config_digest,
                    found: config_digest,
                });
            }
            s
        }
        None => {
            let seeds = catalog.assets(Some(&cfg.synth.sources));
            if seeds.is_empty() {
                return Err(OrchestratorError::CatalogEmpty);
            }
            let mut keyed: Vec<([u8; 32], WorkUnit)> = seeds
                .iter()
                .map(|a| {
                    (
                        order_key(cfg.seed, &a.digest.hex),
                        WorkUnit {
                            id: a.asset_id.clone(),
                            dialect: cfg.synth.dialect,
                        },
                    )
                })
                .collect();
            keyed.sort_by_key(|x| x.0);
            let mut work_list: Vec<WorkUnit> = keyed.into_iter().map(|(_, u)| u).collect();
            if let Some(cap) = cfg.synth.sample_cap {
                work_list.truncate(cap);
            }
            let state = PipelineState {
                kind: "synth".to_string(),
                round_index: cfg.round.round_index,
                stage: "selected".to_string(),
                work_list,
                completed: 0,
                stats: RoundStats::new("synth", cfg.round.round_index),
                config_digest: config_digest.clone(),
                aux: Default::default(),
            };
            store.save_state(&state)?;
            state
        }
    };
    if hook("select", state.completed) == HookAction::Abort {
        return Err(OrchestratorError::Aborted);
    }

    let code_dedup = store.load_dedup("codes");
    let record_dedup = store.load_dedup("records");
    let images_dir = pass_dir.join("images");

    while state.completed < state.work_list.len() {
        let chunk_end = (state.completed + cfg.checkpoint_every).min(state.work_list.len());
        let chunk = state.work_list[state.completed..chunk_end].to_vec();

        // Phase 1 (parallel): regenerate and render candidates per seed.
        type Candidates = Vec<(CodeSample, RenderOutcome)>;
        let generated: Vec<Result<Candidates, String>> =
            parallel_map(chunk, cfg.synth.pool_width, |unit| {
                let asset = match catalog.find_asset(&unit.id) {
                    Some(a) => a,
                    None => return Ok(Vec::new()),
                };
                let mut out = Vec::new();
                for nonce in 0..cfg.synth.attempts_per_seed {
                    let result = match gate.image_to_code(
                        &asset,
                        unit.dialect,
                        cfg.synth.temperature,
                        &cfg.roles.image_to_code,
                        cfg.round.round_index,
                        nonce,
                    ) {
                        Ok(r) => r,
                        Err(_) => continue,
                    };
                    let code = match result.extracted_code {
                        Some(c) => c,
                        None => continue,
                    };
                    match renderer.render(&renderer.job(code.clone())) {
                        Ok(outcome) => out.push((code, outcome)),
                        Err(e) => return Err(e.to_string()),
                    }
                }
                Ok(out)
            });

        // Phase 2 (serial): cleaning chain and pair assembly in work order.
        let mut chunk_pairs: Vec<PairRecord> = Vec::new();
        let mut audit = Vec::new();
        for per_seed in generated {
            let candidates = match per_seed {
                Ok(c) => c,
                Err(e) => return Err(OrchestratorError::Sandbox(e)),
            };
            for (code, outcome) in candidates {
                state.stats.attempted += 1;
                state.stats.record_render(&outcome);
                if outcome.status != RenderStatus::Success {
                    continue;
                }
                let image = outcome.image.as_ref().expect("success carries image");
                let stats = match pixel_stats_from_bytes(&image.png_bytes) {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                let chain = run_chain(&code, &stats, &cfg.filters, &code_dedup);
                audit.extend(chain.trail.iter().cloned());
                state.stats.chain.record(&chain.verdict);
                if !chain.verdict.is_pass() {
                    continue;
                }
                let pair = assemble_pair(
                    &code,
                    &outcome,
                    &chain.verdict,
                    cfg.round.round_index,
                    &images_dir,
                )
                .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
                state.stats.pairs_emitted += 1;
                chunk_pairs.push(pair);
            }
        }

        // Phase 3 (parallel): craft a question and solve it twice per pair.
        type Solved = (SynthQuestion, SolutionAttempt, SolutionAttempt);
        let solved: Vec<(PairRecord, Result<Solved, String>)> =
            parallel_map(chunk_pairs, cfg.synth.pool_width, |pair| {
                let question = match craft_question(&pair, &gate, &cfg.roles.question_gen) {
                    Ok(q) => q,
                    Err(e) => return (pair, Err(e.to_string())),
                };
                let (specialist, generalist) = solve_dual(
                    &question,
                    &pair,
                    &gate,
                    &cfg.roles.solver_math,
                    &cfg.roles.solver_general,
                    cfg.synth.solver_temperature,
                );
                (pair, Ok((question, specialist, generalist)))
            });

        // Phase 4 (serial): consistency gate and record post-filtering.
        let mut staged: Vec<ProblemRecord> = Vec::new();
        for (pair, outcome) in solved {
            match outcome {
                Err(_) => state.stats.question_failures += 1,
                Ok((question, specialist, generalist)) => {
                    state.stats.questions_crafted += 1;
                    state.stats.solved += 1;
                    match accept_sample(
                        &question,
                        &specialist,
                        &generalist,
                        &pair,
                        cfg.synth.agreement_tol,
                    ) {
                        None => {}
                        Some(record) => {
                            state.stats.accepted += 1;
                            match post_filter(&record, &cfg.post_filters, &record_dedup) {
                                FilterVerdict::Pass => {
                                    state.stats.problems_emitted += 1;
                                    staged.push(record);
                                }
                                FilterVerdict::Reject { .. } => {
                                    state.stats.post_filter_rejects += 1
                                }
                            }
                        }
                    }
                }
            }
        }

        store.append_staging(&staged)?;
        append_audit(&pass_dir, &audit)?;
        store.save_dedup("codes", &code_dedup)?;
        store.save_dedup("records", &record_dedup)?;
        state.completed = chunk_end;
        state.stage = "chunk".to_string();
        store.save_state(&state)?;
        if hook("chunk", state.completed) == HookAction::Abort {
            return Err(OrchestratorError::Aborted);
        }
    }

    if hook("finalize", state.completed) == HookAction::Abort {
        return Err(OrchestratorError::Aborted);
    }
    let records: Vec<ProblemRecord> = store.load_staging()?;
    let mut outs: Vec<ProblemOut> = records.iter().map(|r| problem_out(r, &pass_dir)).collect();
    outs.sort_by_key(|o| {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(o.record_id.as_bytes()))
    });
    let mut buf = Vec::new();
    for o in &outs {
        serde_json::to_writer(&mut buf, o).expect("problem record serializes");
        buf.push(b'\n');
    }
    write_atomic(&pass_dir.join("problems.jsonl"), &buf)
        .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
    let manifest = DatasetManifest {
        name: "problems".to_string(),
        split: Split::Train,
        record_count: outs.len() as u64,
        tikz_count: outs
            .iter()
            .filter(|o| o.provenance.dialect == Dialect::Tikz)
            .count() as u64,
        plot_count: outs
            .iter()
            .filter(|o| o.provenance.dialect == Dialect::PlotScript)
            .count() as u64,
        config_digest: state.config_digest.clone(),
        output_files: vec!["problems.jsonl".to_string()],
    };
    write_atomic(
        &pass_dir.join("problems.manifest.json"),
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
    state.stats.wall_ms += started.elapsed().as_millis() as u64;
    write_stats(&pass_dir, &state.stats)?;
    state.stage = "complete".to_string();
    store.save_state(&state)?;
    Ok(state.stats)
}

/// K12 processing statistics; admitted + rejected = ingested.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct K12Stats {
    pub ingested: u64,
    pub admitted: u64,
    pub rejected_no_figure: u64,
    pub missing_assets: u64,
    pub ocr_flagged: u64,
    pub schema_invalid: u64,
    pub processed: u64,
}

impl K12Stats {
    pub fn is_conserved(&self) -> bool {
        self.ingested == self.admitted + self.rejected_no_figure + self.missing_assets
            && self.admitted == self.processed + self.schema_invalid
    }
}

/// Process a K12 problem file: partition images, OCR equations into the
/// question, augment with the structured prompt, validate, and emit.
pub fn run_k12_process(
    cfg: &PipelineConfig,
    input: &Path,
    output: &Path,
) -> Result<K12Stats, OrchestratorError> {
    let catalog = Catalog::open(&cfg.paths.catalog)
        .map_err(|e| OrchestratorError::Config(e.to_string()))?;
    let gate = ModelGate::new(cfg.endpoints.clone());
    let ocr: Box<dyn OcrClient> = match &cfg.k12.ocr {
        OcrSettings::Stub { fixtures } => Box::new(StubOcr {
            fixtures: fixtures.clone(),
            failing: Vec::new(),
        }),
        OcrSettings::Http { base_url } => Box::new(HttpOcr::new(base_url.clone())),
    };
    let problems = read_problems(input).map_err(|e| OrchestratorError::Config(e.to_string()))?;

    enum Item {
        Missing,
        NoFigure,
        Invalid,
        Processed(Box<ProcessedProblem>, bool),
    }
    let results = parallel_map(problems, cfg.k12.pool_width, |problem| {
        let (figures, equations) =
            match partition_problem_images(&problem, &catalog, &cfg.classify) {
                Ok(parts) => parts,
                Err(K12Error::MissingAsset(_)) => return Item::Missing,
                Err(_) => return Item::Invalid,
            };
        if !admit_problem(&figures).is_pass() {
            return Item::NoFigure;
        }
        let ocr_out = ocr_equations(&problem.question, &equations, ocr.as_ref());
        let flagged = !ocr_out.failed_assets.is_empty();
        let mut spliced = problem.clone();
        spliced.question = ocr_out.question;
        match augment(&spliced, &figures, &gate, &cfg.roles.k12_processor) {
            Ok(processed) => Item::Processed(Box::new(processed), flagged),
            Err(_) => Item::Invalid,
        }
    });

    let mut stats = K12Stats::default();
    let mut processed = Vec::new();
    for item in results {
        stats.ingested += 1;
        match item {
            Item::Missing => stats.missing_assets += 1,
            Item::NoFigure => stats.rejected_no_figure += 1,
            Item::Invalid => {
                stats.admitted += 1;
                stats.schema_invalid += 1;
            }
            Item::Processed(p, flagged) => {
                stats.admitted += 1;
                stats.processed += 1;
                if flagged {
                    stats.ocr_flagged += 1;
                }
                processed.push(*p);
            }
        }
    }
    write_processed(output, &processed)
        .map_err(|e| OrchestratorError::CheckpointIo(e.to_string()))?;
    Ok(stats)
}

/// Resume whichever pass last checkpointed without completing.
/// Returns the finished stats, or None when nothing needs resuming.
pub fn resume(cfg: &PipelineConfig) -> Result<Option<RoundStats>, OrchestratorError> {
    let output_dir = &cfg.paths.output_dir;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(output_dir)
        .map_err(|e| OrchestratorError::Config(format!("{}: {e}", output_dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("checkpoint.json").exists())
        .collect();
    dirs.sort();
    for dir in dirs {
        let store = CheckpointStore::new(&dir)?;
        if store.is_complete() {
            continue;
        }
        let state = match store.load_state() {
            Some(s) => s,
            None => continue,
        };
        let stats = match state.kind.as_str() {
            "round" => run_round(cfg)?,
            "translate" => {
                let source = state
                    .aux
                    .get("source_dir")
                    .ok_or_else(|| OrchestratorError::Config("no source_dir in checkpoint".into()))?;
                run_translation_pass(cfg, Path::new(source))?
            }
            "synth" => run_problem_synthesis(cfg)?,
            other => {
                return Err(OrchestratorError::Config(format!(
                    "unknown checkpoint kind {other}"
                )))
            }
        };
        return Ok(Some(stats));
    }
    Ok(None)
}

/// Machine-readable report over pass histories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rounds: Vec<RoundStats>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn parse(text: &str) -> Result<Report, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Human-readable table: one row per pass plus a cumulative line.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "pass        round  attempted  success%  tikz%   plot%   pass-share%  pairs    problems  sol-pass%\n",
        );
        for s in &self.rounds {
            let success = if s.render.total > 0 {
                format!("{:.1}", 100.0 * s.render.successes as f64 / s.render.total as f64)
            } else {
                "-".to_string()
            };
            let tikz = s
                .render
                .dialect_rate(Dialect::Tikz)
                .map(|r| format!("{:.1}", r * 100.0))
                .unwrap_or_else(|| "-".to_string());
            let plot = s
                .render
                .dialect_rate(Dialect::PlotScript)
                .map(|r| format!("{:.1}", r * 100.0))
                .unwrap_or_else(|| "-".to_string());
            let pass_share = if s.chain.inputs > 0 {
                format!("{:.1}", 100.0 * s.chain.passed as f64 / s.chain.inputs as f64)
            } else {
                "-".to_string()
            };
            let sol = s
                .solution_pass_rate()
                .map(|r| format!("{:.1}", r * 100.0))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "{:<11} {:<6} {:<10} {:<9} {:<7} {:<7} {:<12} {:<8} {:<9} {}\n",
                s.kind,
                s.round_index,
                s.attempted,
                success,
                tikz,
                plot,
                pass_share,
                s.pairs_emitted,
                s.problems_emitted,
                sol
            ));
            if s.chain.inputs > 0 {
                for (reason, count) in &s.chain.rejects {
                    out.push_str(&format!(
                        "    reject {:?}: {} ({:.1}% of chain inputs)\n",
                        reason,
                        count,
                        100.0 * *count as f64 / s.chain.inputs as f64
                    ));
                }
            }
        }
        out
    }
}

/// Gather stats files from the output directory, in directory order.
pub fn collect_stats(output_dir: &Path) -> Vec<RoundStats> {
    let mut dirs: Vec<PathBuf> = match std::fs::read_dir(output_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.join("stats.json").exists())
            .collect(),
        Err(_) => return Vec::new(),
    };
    dirs.sort();
    dirs.iter().filter_map(|d| read_stats(d).ok()).collect()
}

pub fn report(history: &[RoundStats]) -> Report {
    Report {
        rounds: history.to_vec(),
    }
}
