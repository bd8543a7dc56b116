//! Command-line driver for the figsynth data engine.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use figsynth::corpus::{self, Catalog, SourceTag};
use figsynth::orchestrator::{
    collect_stats, report, resume, run_k12_process, run_problem_synthesis, run_round,
    run_translation_pass, PipelineConfig,
};

#[derive(Parser)]
#[command(
    name = "figsynth",
    about = "Image-to-code dataset synthesis engine: ingest math figures, generate and validate figure code, emit training pairs and synthesized problems"
)]
struct Cli {
    /// Pipeline configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Force deterministic stub endpoints and the stub renderer.
    #[arg(long, global = true)]
    stub: bool,

    /// Seed for deterministic work ordering and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a directory of images into the catalog.
    Ingest {
        /// Directory containing PNG/JPEG files.
        #[arg(long)]
        root: PathBuf,
        /// Source tag: DATIKZ_SEED, K12, TEXTBOOK, ARXIV, OPEN_DATASET, SYNTHESIZED.
        #[arg(long)]
        source: String,
    },
    /// Run one image-to-code round: generate, render, clean, emit pairs.
    Round,
    /// Translate an emitted TikZ dataset into plot-script pairs.
    Translate {
        /// Round directory holding the source dataset.jsonl.
        #[arg(long)]
        source: PathBuf,
    },
    /// Synthesize new problems over resynthesized figures.
    SynthProblems,
    /// Process a K12 problem file: split images, OCR equations, augment.
    K12Process {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print per-round and cumulative statistics.
    Report {
        /// Also write the machine-readable report to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Continue the most recent incomplete pass from its checkpoint.
    Resume,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| anyhow::anyhow!(e))?,
        None => {
            let mut cfg = PipelineConfig::default();
            cfg.normalize();
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.stub {
        cfg.force_stub_endpoints();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;

    match &cli.command {
        Command::Ingest { root, source } => {
            let source = SourceTag::parse(source)
                .with_context(|| format!("unknown source tag {source}"))?;
            let catalog = Catalog::open(&cfg.paths.catalog)?;
            let report = corpus::ingest(&catalog, root, source)?;
            println!(
                "ingested {} assets, skipped {}, already present {}",
                report.ingested.len(),
                report.skipped.len(),
                report.already_present
            );
            for (path, reason) in &report.skipped {
                eprintln!("skipped {}: {}", path.display(), reason);
            }
        }
        Command::Round => {
            let stats = run_round(&cfg)?;
            print!("{}", report(&[stats]).render_text());
        }
        Command::Translate { source } => {
            let stats = run_translation_pass(&cfg, source)?;
            print!("{}", report(&[stats]).render_text());
        }
        Command::SynthProblems => {
            let stats = run_problem_synthesis(&cfg)?;
            print!("{}", report(&[stats]).render_text());
        }
        Command::K12Process { input, output } => {
            let stats = run_k12_process(&cfg, input, output)?;
            println!(
                "ingested {}, admitted {}, processed {}, no-figure {}, missing-assets {}, schema-invalid {}, ocr-flagged {}",
                stats.ingested,
                stats.admitted,
                stats.processed,
                stats.rejected_no_figure,
                stats.missing_assets,
                stats.schema_invalid,
                stats.ocr_flagged
            );
            if !stats.is_conserved() {
                bail!("k12 bookkeeping violated conservation");
            }
        }
        Command::Report { json } => {
            let history = collect_stats(&cfg.paths.output_dir);
            if history.is_empty() {
                bail!("no completed passes under {}", cfg.paths.output_dir.display());
            }
            let rep = report(&history);
            print!("{}", rep.render_text());
            if let Some(path) = json {
                std::fs::write(path, rep.to_json())?;
            }
        }
        Command::Resume => match resume(&cfg)? {
            Some(stats) => print!("{}", report(&[stats]).render_text()),
            None => println!("nothing to resume"),
        },
    }
    Ok(())
}
