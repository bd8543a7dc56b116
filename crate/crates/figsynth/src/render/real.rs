//! Real toolchain paths: TikZ through TeX + PDF rasterizer, plot scripts
//! through a Python interpreter.

use std::fs;
use std::path::Path;
use std::time::Duration;

use super::sandbox::run_limited;
use super::{RenderConfig, RenderError, RenderJob, RenderOutcome, RenderStatus, RenderedImage};
use crate::modelgate::Dialect;

pub(super) fn render_real(
    cfg: &RenderConfig,
    job: &RenderJob,
) -> Result<RenderOutcome, RenderError> {
    fs::create_dir_all(&cfg.workdir_root)
        .map_err(|e| RenderError::SandboxSetup(format!("workdir root: {e}")))?;
    let workdir = tempfile::Builder::new()
        .prefix("render-")
        .tempdir_in(&cfg.workdir_root)
        .map_err(|e| RenderError::SandboxSetup(format!("workdir: {e}")))?;

    let result = match job.code.dialect {
        Dialect::Tikz => render_tikz(cfg, job, workdir.path()),
        Dialect::PlotScript => render_plotscript(cfg, job, workdir.path()),
    };
    // TempDir drop removes the workdir; nothing rendered survives outside
    // the returned outcome.
    result
}

fn outcome(job: &RenderJob, status: RenderStatus, image: Option<RenderedImage>, log: String, wall_ms: u64) -> RenderOutcome {
    RenderOutcome {
        code_id: job.code.code_id.clone(),
        dialect: job.code.dialect,
        status,
        image,
        log,
        wall_ms,
    }
}

/// Wrap bare TikZ in a standalone document; pass full documents through.
pub fn wrap_tikz_document(code: &str, preamble: &str) -> String {
    if code.contains("\\documentclass") {
        return code.to_string();
    }
    let body = if code.contains("\\begin{tikzpicture}") {
        code.to_string()
    } else {
        format!("\\begin{{tikzpicture}}\n{code}\n\\end{{tikzpicture}}")
    };
    format!(
        "\\documentclass[tikz,border=2pt]{{standalone}}\n{preamble}\n\\begin{{document}}\n{body}\n\\end{{document}}\n"
    )
}

fn render_tikz(cfg: &RenderConfig, job: &RenderJob, wd: &Path) -> Result<RenderOutcome, RenderError> {
    let doc = wrap_tikz_document(&job.code.text, &cfg.tikz_preamble);
    fs::write(wd.join("doc.tex"), &doc)
        .map_err(|e| RenderError::SandboxSetup(format!("write doc.tex: {e}")))?;

    let compile = run_limited(
        &cfg.tex_command,
        &[
            "-interaction=nonstopmode",
            "-halt-on-error",
            "-no-shell-escape",
            "doc.tex",
        ],
        wd,
        Duration::from_secs_f64(job.timeout_s),
        cfg.memory_limit_mb,
        cfg.isolate_network,
        cfg.log_cap_bytes,
    );
    if let Some(err) = compile.setup_error {
        return Err(RenderError::SandboxSetup(err));
    }
    if compile.timed_out {
        return Ok(outcome(job, RenderStatus::Timeout, None, compile.log, compile.wall_ms));
    }
    let pdf = wd.join("doc.pdf");
    if !compile.exit_ok || !pdf.exists() {
        return Ok(outcome(job, RenderStatus::CompileFail, None, compile.log, compile.wall_ms));
    }

    let dpi = job.raster_dpi.to_string();
    let raster = run_limited(
        &cfg.pdf_raster_command,
        &["-png", "-r", &dpi, "-singlefile", "doc.pdf", "figure"],
        wd,
        Duration::from_secs_f64(job.timeout_s),
        cfg.memory_limit_mb,
        cfg.isolate_network,
        cfg.log_cap_bytes,
    );
    if let Some(err) = raster.setup_error {
        return Err(RenderError::SandboxSetup(err));
    }
    let wall_ms = compile.wall_ms + raster.wall_ms;
    let mut log = compile.log;
    if !raster.log.is_empty() {
        log.push_str("\n--- raster ---\n");
        log.push_str(&raster.log);
    }
    if raster.timed_out {
        return Ok(outcome(job, RenderStatus::Timeout, None, log, wall_ms));
    }
    if !raster.exit_ok {
        return Ok(outcome(job, RenderStatus::RuntimeFail, None, log, wall_ms));
    }
    finish_from_png(job, wd.join("figure.png"), log, wall_ms)
}

/// Prefix forcing a non-interactive backend, suffix saving the current
/// figure when the script showed instead of saving.
fn instrument_plotscript(code: &str) -> String {
    format!(
        "import matplotlib\nmatplotlib.use(\"Agg\")\n{code}\n\nimport os as _os\nimport matplotlib.pyplot as _plt\n_found = [_f for _f in _os.listdir(\".\") if _f.lower().endswith((\".png\", \".jpg\", \".jpeg\"))]\nif not _found and _plt.get_fignums():\n    _plt.savefig(\"figure.png\")\n"
    )
}

fn render_plotscript(cfg: &RenderConfig, job: &RenderJob, wd: &Path) -> Result<RenderOutcome, RenderError> {
    fs::write(wd.join("main.py"), instrument_plotscript(&job.code.text))
        .map_err(|e| RenderError::SandboxSetup(format!("write main.py: {e}")))?;

    let run = run_limited(
        &cfg.python_command,
        &["main.py"],
        wd,
        Duration::from_secs_f64(job.timeout_s),
        cfg.memory_limit_mb,
        cfg.isolate_network,
        cfg.log_cap_bytes,
    );
    if let Some(err) = run.setup_error {
        return Err(RenderError::SandboxSetup(err));
    }
    if run.timed_out {
        return Ok(outcome(job, RenderStatus::Timeout, None, run.log, run.wall_ms));
    }
    if !run.exit_ok {
        return Ok(outcome(job, RenderStatus::RuntimeFail, None, run.log, run.wall_ms));
    }
    match first_image_in(wd) {
        Some(path) => finish_from_png(job, path, run.log, run.wall_ms),
        None => Ok(outcome(job, RenderStatus::EmptyOutput, None, run.log, run.wall_ms)),
    }
}

fn first_image_in(wd: &Path) -> Option<std::path::PathBuf> {
    let mut candidates: Vec<_> = fs::read_dir(wd)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    candidates.sort();
    candidates.into_iter().next()
}

fn finish_from_png(
    job: &RenderJob,
    path: std::path::PathBuf,
    log: String,
    wall_ms: u64,
) -> Result<RenderOutcome, RenderError> {
    let bytes = match fs::read(&path) {
        Ok(b) if !b.is_empty() => b,
        _ => return Ok(outcome(job, RenderStatus::EmptyOutput, None, log, wall_ms)),
    };
    match RenderedImage::from_png_bytes(bytes) {
        Some(img) if img.width_px >= 1 && img.height_px >= 1 => {
            Ok(outcome(job, RenderStatus::Success, Some(img), log, wall_ms))
        }
        _ => Ok(outcome(job, RenderStatus::EmptyOutput, None, log, wall_ms)),
    }
}
