//! Sandboxed execution of candidate figure code.
//!
//! Every sample that survives generation is run in an isolated, freshly
//! created working directory with a wall-clock timeout, a memory cap and
//! no network, then classified: a TikZ sample is wrapped in a standalone
//! document, compiled and rasterized; a plot script is executed with the
//! display disabled and its figure forced into the workdir. Failures are
//! statuses, never pipeline aborts.

mod pool;
mod precheck;
mod real;
mod sandbox;
mod stub;

pub use pool::{render_all, PoolStats};
pub use precheck::{static_precheck, PrecheckConfig, PrecheckResult};
pub use stub::{code_digest, StubOutcomeSpec, StubRenderConfig};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AssetKind, ContentDigest, ImageAsset, SourceTag};
use crate::modelgate::{CodeSample, Dialect};

/// Classified result of a render attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RenderStatus {
    Success,
    CompileFail,
    RuntimeFail,
    Timeout,
    EmptyOutput,
    ForbiddenAccess,
}

/// A rendered raster held in memory until a sink persists it.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub png_bytes: Vec<u8>,
    pub width_px: u32,
    pub height_px: u32,
    pub digest: ContentDigest,
}

impl RenderedImage {
    pub fn from_png_bytes(png_bytes: Vec<u8>) -> Option<RenderedImage> {
        let img = image::load_from_memory(&png_bytes).ok()?;
        let digest = crate::corpus::digest_decoded(&img);
        Some(RenderedImage {
            width_px: img.width(),
            height_px: img.height(),
            digest,
            png_bytes,
        })
    }

    /// View as a cataloged asset once persisted at `storage_ref`.
    pub fn to_asset(&self, storage_ref: PathBuf) -> ImageAsset {
        ImageAsset {
            asset_id: format!("img-{}", self.digest.short()),
            source: SourceTag::Synthesized,
            width_px: self.width_px,
            height_px: self.height_px,
            digest: self.digest.clone(),
            storage_ref,
            kind: AssetKind::Figure,
        }
    }
}

/// Outcome of one render job: exactly one status; an image iff SUCCESS.
#[derive(Debug, Clone)]
pub struct RenderOutcome {
    pub code_id: String,
    pub dialect: Dialect,
    pub status: RenderStatus,
    pub image: Option<RenderedImage>,
    pub log: String,
    pub wall_ms: u64,
}

/// A unit of sandboxed work.
#[derive(Debug, Clone)]
pub struct RenderJob {
    pub code: CodeSample,
    pub timeout_s: f64,
    pub raster_dpi: u32,
}

#[derive(Debug, Error)]
pub enum RenderError {
    /// Host misconfiguration: missing toolchain binary, unusable workdir
    /// root. The only error that is not expressed as a status.
    #[error("sandbox setup failure: {0}")]
    SandboxSetup(String),
    #[error("empty outcome list")]
    EmptyList,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RendererKind {
    Real,
    Stub(StubRenderConfig),
}

/// Renderer settings; per-job limits default from here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub kind: RendererKind,
    pub tex_command: String,
    pub pdf_raster_command: String,
    pub python_command: String,
    pub raster_dpi: u32,
    pub timeout_s: f64,
    pub memory_limit_mb: u64,
    /// Allowance past the timeout before the wall-clock bound is violated.
    pub grace_ms: u64,
    pub log_cap_bytes: usize,
    pub workdir_root: PathBuf,
    pub isolate_network: bool,
    pub tikz_preamble: String,
    pub precheck: PrecheckConfig,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            kind: RendererKind::Real,
            tex_command: "pdflatex".to_string(),
            pdf_raster_command: "pdftoppm".to_string(),
            python_command: "python3".to_string(),
            raster_dpi: 150,
            timeout_s: 60.0,
            memory_limit_mb: 1024,
            grace_ms: 2000,
            log_cap_bytes: 64 * 1024,
            workdir_root: std::env::temp_dir(),
            isolate_network: true,
            tikz_preamble: "\\usepackage{pgfplots}\n\\pgfplotsset{compat=newest}".to_string(),
            precheck: PrecheckConfig::default(),
        }
    }
}

impl RenderConfig {
    pub fn stub() -> RenderConfig {
        RenderConfig {
            kind: RendererKind::Stub(StubRenderConfig::default()),
            ..RenderConfig::default()
        }
    }
}

/// Executes render jobs; safe to share across worker threads.
pub struct Renderer {
    config: RenderConfig,
}

impl Renderer {
    pub fn new(config: RenderConfig) -> Renderer {
        Renderer { config }
    }

    pub fn config(&self) -> &RenderConfig {
        &self.config
    }

    pub fn job(&self, code: CodeSample) -> RenderJob {
        RenderJob {
            code,
            timeout_s: self.config.timeout_s,
            raster_dpi: self.config.raster_dpi,
        }
    }

    /// Run one job to a classified outcome. The static precheck is applied
    /// first and a violation short-circuits before anything executes.
    pub fn render(&self, job: &RenderJob) -> Result<RenderOutcome, RenderError> {
        if let PrecheckResult::Forbidden(reason) = static_precheck(&job.code, &self.config.precheck)
        {
            return Ok(RenderOutcome {
                code_id: job.code.code_id.clone(),
                dialect: job.code.dialect,
                status: RenderStatus::ForbiddenAccess,
                image: None,
                log: reason,
                wall_ms: 0,
            });
        }
        match &self.config.kind {
            RendererKind::Stub(stub_cfg) => Ok(stub::render_stub(stub_cfg, job)),
            RendererKind::Real => real::render_real(&self.config, job),
        }
    }
}

/// Success counts over a batch of outcomes, overall and per dialect.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub total: u64,
    pub successes: u64,
    pub tikz_total: u64,
    pub tikz_successes: u64,
    pub plot_total: u64,
    pub plot_successes: u64,
}

impl SuccessRate {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.total as f64
    }

    pub fn dialect_rate(&self, dialect: Dialect) -> Option<f64> {
        let (total, ok) = match dialect {
            Dialect::Tikz => (self.tikz_total, self.tikz_successes),
            Dialect::PlotScript => (self.plot_total, self.plot_successes),
        };
        (total > 0).then(|| ok as f64 / total as f64)
    }
}

/// Fraction of SUCCESS outcomes, with a per-dialect breakdown.
pub fn success_rate(outcomes: &[RenderOutcome]) -> Result<SuccessRate, RenderError> {
    if outcomes.is_empty() {
        return Err(RenderError::EmptyList);
    }
    let mut rate = SuccessRate::default();
    for o in outcomes {
        rate.total += 1;
        let ok = o.status == RenderStatus::Success;
        if ok {
            rate.successes += 1;
        }
        match o.dialect {
            Dialect::Tikz => {
                rate.tikz_total += 1;
                if ok {
                    rate.tikz_successes += 1;
                }
            }
            Dialect::PlotScript => {
                rate.plot_total += 1;
                if ok {
                    rate.plot_successes += 1;
                }
            }
        }
    }
    Ok(rate)
}

#[cfg(test)]
pub(crate) fn outcome_fixture(dialect: Dialect, status: RenderStatus, tag: u32) -> RenderOutcome {
    RenderOutcome {
        code_id: format!("fixture-{tag}"),
        dialect,
        status,
        image: None,
        log: String::new(),
        wall_ms: 1,
    }
}
