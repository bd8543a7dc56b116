//! Integration tests against the real plot-script toolchain. Skipped when
//! no matplotlib-capable interpreter is installed; the TeX path has its
//! own gated test in the acceptance suite.

use std::path::{Path, PathBuf};

use figsynth::modelgate::{CodeSample, Dialect, Provenance};
use figsynth::render::{RenderConfig, RenderStatus, Renderer};

fn plot_sample(text: &str) -> CodeSample {
    CodeSample::new(Dialect::PlotScript, text.to_string(), Provenance::default())
}

fn have_matplotlib() -> bool {
    std::process::Command::new("python3")
        .args(["-c", "import matplotlib"])
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn renderer_in(dir: &Path, timeout_s: f64) -> Renderer {
    let mut cfg = RenderConfig::default();
    cfg.workdir_root = dir.to_path_buf();
    cfg.timeout_s = timeout_s;
    Renderer::new(cfg)
}

fn snapshot(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        if let Ok(rd) = std::fs::read_dir(dir) {
            for e in rd.flatten() {
                out.push(e.path());
                if e.path().is_dir() {
                    walk(&e.path(), out);
                }
            }
        }
    }
    let mut v = Vec::new();
    walk(root, &mut v);
    v.sort();
    v
}

#[test]
fn plotscript_renders_a_real_figure() {
    if !have_matplotlib() {
        eprintln!("skipping: no python3/matplotlib");
        return;
    }
    let dir = tempfile::TempDir::new().unwrap();
    let renderer = renderer_in(dir.path(), 60.0);
    let before = snapshot(dir.path());

    let job = renderer.job(plot_sample(
        "import matplotlib.pyplot as plt\nfig, ax = plt.subplots()\nax.plot([0, 1, 2], [0, 1, 4], marker='o')\nfig.savefig('figure.png', dpi=100)\n",
    ));
    let outcome = renderer.render(&job).unwrap();
    assert_eq!(outcome.status, RenderStatus::Success, "log: {}", outcome.log);
    let image = outcome.image.unwrap();
    assert!(image.width_px > 100 && image.height_px > 100);

    assert_eq!(before, snapshot(dir.path()), "workdir leaked files");
}

#[test]
fn plotscript_show_without_save_is_rescued() {
    if !have_matplotlib() {
        eprintln!("skipping: no python3/matplotlib");
        return;
    }
    let dir = tempfile::TempDir::new().unwrap();
    let renderer = renderer_in(dir.path(), 60.0);
    let job = renderer.job(plot_sample(
        "import matplotlib.pyplot as plt\nplt.plot([1, 2, 3], [3, 1, 2])\nplt.show()\n",
    ));
    let outcome = renderer.render(&job).unwrap();
    assert_eq!(outcome.status, RenderStatus::Success, "log: {}", outcome.log);
}

#[test]
fn plotscript_error_is_runtime_fail_with_log() {
    if !have_matplotlib() {
        eprintln!("skipping: no python3/matplotlib");
        return;
    }
    let dir = tempfile::TempDir::new().unwrap();
    let renderer = renderer_in(dir.path(), 60.0);
    let job = renderer.job(plot_sample("raise ValueError('deliberate failure')\n"));
    let outcome = renderer.render(&job).unwrap();
    assert_eq!(outcome.status, RenderStatus::RuntimeFail);
    assert!(outcome.log.contains("deliberate failure"));
}

#[test]
fn plotscript_without_figure_is_empty_output() {
    if !have_matplotlib() {
        eprintln!("skipping: no python3/matplotlib");
        return;
    }
    let dir = tempfile::TempDir::new().unwrap();
    let renderer = renderer_in(dir.path(), 60.0);
    let job = renderer.job(plot_sample("x = 1 + 1\n"));
    let outcome = renderer.render(&job).unwrap();
    assert_eq!(outcome.status, RenderStatus::EmptyOutput);
}

#[test]
fn plotscript_infinite_loop_times_out_within_grace() {
    if !have_matplotlib() {
        eprintln!("skipping: no python3/matplotlib");
        return;
    }
    let dir = tempfile::TempDir::new().unwrap();
    let renderer = renderer_in(dir.path(), 5.0);
    let job = renderer.job(plot_sample("while True:\n    pass\n"));
    let outcome = renderer.render(&job).unwrap();
    assert_eq!(outcome.status, RenderStatus::Timeout);
    assert!(outcome.wall_ms >= 5000, "wall {}", outcome.wall_ms);
    assert!(
        outcome.wall_ms <= 5000 + renderer.config().grace_ms,
        "wall {}",
        outcome.wall_ms
    );
}

#[test]
fn forbidden_file_access_never_executes() {
    // Holds with or without an interpreter: the precheck is static.
    let dir = tempfile::TempDir::new().unwrap();
    let renderer = renderer_in(dir.path(), 5.0);
    let job = renderer.job(plot_sample(
        "import pandas as pd\ndata = pd.read_csv('data.csv')\n",
    ));
    let outcome = renderer.render(&job).unwrap();
    assert_eq!(outcome.status, RenderStatus::ForbiddenAccess);
    assert!(outcome.log.contains("read_csv"));
}
