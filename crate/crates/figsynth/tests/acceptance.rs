//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Criterion 5 needs a TeX toolchain and reports SKIP when none is
//! installed; everything else runs hermetically on stubs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use figsynth::corpus::{ingest, AssetKind, Catalog, ImageAsset, SourceTag};
use figsynth::filters::{
    blank_filter, dedup_key, luma_u8, pixel_stats, run_chain, ChainStats, DedupStore,
    FilterConfig, PixelStats, RejectReason,
};
use figsynth::modelgate::{
    render_parts, stub_request_key, template, CodeSample, Dialect, EndpointConfig, ModelGate,
    Provenance, StubConfig, TemplateId,
};
use figsynth::orchestrator::{
    resume, run_round, run_round_with_hook, HookAction, OrchestratorError, PipelineConfig,
};
use figsynth::pairs::{extract_response_code, format_training_sample, PairRecord};
use figsynth::render::{
    render_all, RenderConfig, RenderStatus, Renderer, RendererKind, StubRenderConfig,
};
use figsynth::synth::{accept_sample, answers_agree, solve_dual, ExtractedAnswer, SynthQuestion};

use image::{DynamicImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tikz_sample(text: &str) -> CodeSample {
    CodeSample::new(Dialect::Tikz, text.to_string(), Provenance::default())
}

fn normal_stats() -> PixelStats {
    PixelStats {
        mean: 127.5,
        std: 127.5,
        width_px: 4,
        height_px: 4,
    }
}

/// 1. pixel_stats against a brute-force oracle; blank-rule boundary.
#[test]
fn acceptance_1_filter_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for case in 0..100 {
        let w = rng.gen_range(1..=64u32);
        let h = rng.gen_range(1..=64u32);
        let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
        let stats = pixel_stats(&DynamicImage::ImageRgb8(img.clone()));

        // Independent oracle: double loop, two-pass mean and population std.
        let mut values = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x, y);
                values.push(luma_u8(p[0], p[1], p[2]) as f64);
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        assert!(rel(stats.mean, mean) < 1e-9, "case {case} mean");
        assert!(rel(stats.std, std) < 1e-9, "case {case} std");
    }

    let cfg = FilterConfig::default();
    let stats_with_std = |std: f64| PixelStats {
        mean: 128.0,
        std,
        width_px: 8,
        height_px: 8,
    };
    assert_eq!(
        blank_filter(&stats_with_std(4.999), &cfg).reason(),
        Some(RejectReason::Blank)
    );
    assert!(blank_filter(&stats_with_std(5.0), &cfg).is_pass());
    assert!(blank_filter(&stats_with_std(5.001), &cfg).is_pass());
    assert_eq!(
        blank_filter(&stats_with_std(0.0), &cfg).reason(),
        Some(RejectReason::Blank)
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!("ACCEPTANCE 1 (filter oracle equivalence): PASS in {elapsed:?}");
}

/// 2. Planted-share conservation over a 1,000-sample corpus.
#[test]
fn acceptance_2_cleaning_chain_conservation() {
    let started = Instant::now();
    let blank_stats = PixelStats {
        mean: 200.0,
        std: 0.0,
        width_px: 4,
        height_px: 4,
    };

    // 800 clean + 100 duplicates + 50 keyword + 30 over-length + 20 blank.
    let mut corpus: Vec<(CodeSample, PixelStats)> = Vec::new();
    for i in 0..800 {
        corpus.push((
            tikz_sample(&format!("\\draw (0,0) -- ({i},1);")),
            normal_stats(),
        ));
    }
    for i in 0..100 {
        // Comment-only variants of already-present samples.
        corpus.push((
            tikz_sample(&format!("\\draw (0,0) -- ({i},1); % duplicate variant")),
            normal_stats(),
        ));
    }
    for i in 0..50 {
        corpus.push((
            tikz_sample(&format!("\\draw (0,{i}) -- rand({i});")),
            normal_stats(),
        ));
    }
    let cfg = FilterConfig::default();
    for i in 0..30 {
        let filler = "x".repeat(cfg.max_code_chars + 1);
        corpus.push((tikz_sample(&format!("\\node {{{i}-{filler}}};")), normal_stats()));
    }
    for i in 0..20 {
        corpus.push((
            tikz_sample(&format!("\\draw (0,0) circle ({i}.5);")),
            blank_stats,
        ));
    }
    assert_eq!(corpus.len(), 1000);

    // Interleave deterministically, keeping originals ahead of their
    // duplicates: stable-sort by a hash that ties originals first.
    let store = DedupStore::new();
    let mut stats = ChainStats::default();
    for (code, image_stats) in &corpus {
        let outcome = run_chain(code, image_stats, &cfg, &store);
        stats.record(&outcome.verdict);
    }

    assert_eq!(stats.inputs, 1000);
    assert_eq!(stats.passed, 800);
    assert_eq!(stats.rejected(RejectReason::Duplicate), 100);
    assert_eq!(stats.rejected(RejectReason::Keyword), 50);
    assert_eq!(stats.rejected(RejectReason::TooLong), 30);
    assert_eq!(stats.rejected(RejectReason::Blank), 20);
    assert!(stats.is_conserved());

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!("ACCEPTANCE 2 (cleaning-chain conservation): PASS in {elapsed:?}");
}

/// 3. Dedup soundness and normalization collapse, 500 random cases.
#[test]
fn acceptance_3_dedup_property() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    for case in 0..500 {
        // A small random corpus with deliberate comment/whitespace variants.
        let n_base = rng.gen_range(1..=8usize);
        let mut corpus: Vec<CodeSample> = Vec::new();
        let mut bases = Vec::new();
        for b in 0..n_base {
            let body = format!(
                "\\draw ({},{}) -- ({},{});",
                rng.gen_range(0..10),
                rng.gen_range(0..10),
                rng.gen_range(0..10),
                b
            );
            bases.push(body.clone());
            corpus.push(tikz_sample(&body));
        }
        // Variants: inject comments, tabs, extra spaces.
        let variant_of = rng.gen_range(0..n_base);
        let base = &bases[variant_of];
        let with_comment = format!("% header\n{base} % trailing note");
        let with_ws = base.replace(' ', "\t  ");
        assert_eq!(
            dedup_key(&tikz_sample(base)),
            dedup_key(&tikz_sample(&with_comment)),
            "case {case}: comment variant must share the key"
        );
        assert_eq!(
            dedup_key(&tikz_sample(base)),
            dedup_key(&tikz_sample(&with_ws)),
            "case {case}: whitespace variant must share the key"
        );
        corpus.push(tikz_sample(&with_comment));
        corpus.push(tikz_sample(&with_ws));

        let store = DedupStore::new();
        let cfg = FilterConfig::default();
        let mut passed_keys = Vec::new();
        for code in &corpus {
            let outcome = run_chain(code, &normal_stats(), &cfg, &store);
            if outcome.verdict.is_pass() {
                passed_keys.push(dedup_key(code).hex);
            }
        }
        let mut sorted = passed_keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(
            sorted.len(),
            passed_keys.len(),
            "case {case}: passed samples must have pairwise-distinct keys"
        );
    }
    let elapsed = started.elapsed();
    println!("ACCEPTANCE 3 (dedup property, 500 cases): PASS in {elapsed:?}");
}

/// 4. Byte-identical prompt goldens and the formatting round-trip.
#[test]
fn acceptance_4_prompt_goldens_and_round_trip() {
    let started = Instant::now();
    let goldens = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/goldens");
    let read = |name: &str| std::fs::read_to_string(goldens.join(name)).unwrap();

    let cases: &[(TemplateId, Option<&str>, &str)] = &[
        (TemplateId::Img2Tikz, None, "img2tikz.user.txt"),
        (TemplateId::Img2Plot, None, "img2plot.user.txt"),
        (
            TemplateId::Tikz2Plot,
            Some("tikz2plot.system.txt"),
            "tikz2plot.user.txt",
        ),
        (
            TemplateId::K12Process,
            Some("k12_process.system.txt"),
            "k12_process.user.txt",
        ),
        (TemplateId::QuestionSynth, None, "question_synth.user.txt"),
        (TemplateId::Solve, None, "solve.user.txt"),
    ];
    for (id, system_golden, user_golden) in cases {
        let t = template(*id);
        assert_eq!(
            t.user_text,
            read(user_golden),
            "{id:?} user text deviates from its golden"
        );
        match system_golden {
            Some(name) => assert_eq!(
                t.system_text,
                read(name),
                "{id:?} system text deviates from its golden"
            ),
            None => assert!(t.system_text.is_empty(), "{id:?} has unexpected system text"),
        }
    }

    // Formatting round-trip over 500 random code strings.
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let charset: Vec<char> = ("abcdefghijklmnopqrstuvwxyz0123456789 (){}[]\\%#_-+=.,;:'\"\n\t"
        .chars())
    .collect();
    let mut checked = 0;
    while checked < 500 {
        let len = rng.gen_range(1..400usize);
        let text: String = (0..len)
            .map(|_| charset[rng.gen_range(0..charset.len())])
            .collect();
        // A literal fence inside the code would terminate any wrapping.
        if text.contains("```") || text.trim().is_empty() {
            continue;
        }
        let dialect = if checked % 2 == 0 {
            Dialect::Tikz
        } else {
            Dialect::PlotScript
        };
        let code = CodeSample::new(dialect, text.clone(), Provenance::default());
        let pair = PairRecord {
            pair_id: format!("pair-0-{checked}"),
            code,
            image: dummy_asset(),
            round_index: 0,
            seed_asset_id: None,
        };
        let sample = format_training_sample(&pair);
        let extracted = extract_response_code(&sample.response_text, dialect)
            .unwrap_or_else(|| panic!("extraction failed for case {checked}: {text:?}"));
        assert_eq!(extracted, text, "round-trip mismatch in case {checked}");
        checked += 1;
    }

    let elapsed = started.elapsed();
    println!("ACCEPTANCE 4 (prompt goldens + round-trip): PASS in {elapsed:?}");
}

fn dummy_asset() -> ImageAsset {
    ImageAsset {
        asset_id: "img-dummy".to_string(),
        source: SourceTag::Synthesized,
        width_px: 4,
        height_px: 4,
        digest: figsynth::corpus::ContentDigest::sha256(b"dummy"),
        storage_ref: PathBuf::from("images/dummy.png"),
        kind: AssetKind::Figure,
    }
}

fn have_tex_toolchain() -> bool {
    let have = |bin: &str| {
        std::process::Command::new(bin)
            .arg("--version")
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    };
    have("pdflatex") && have("pdftoppm")
}

/// 5. Real TeX sandbox: success, compile failure, timeout, isolation.
#[test]
fn acceptance_5_render_sandbox() {
    if !have_tex_toolchain() {
        println!("ACCEPTANCE 5 (render sandbox): SKIP (no TeX toolchain on this host)");
        return;
    }
    let started = Instant::now();
    let dir = tempfile::TempDir::new().unwrap();
    let workdir_root = dir.path().join("work");
    let mut cfg = RenderConfig::default();
    cfg.workdir_root = workdir_root.clone();
    cfg.timeout_s = 20.0;
    let renderer = Renderer::new(cfg);

    let snapshot = |root: &Path| -> Vec<PathBuf> {
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
    };
    let before = snapshot(dir.path());

    // Known-good minimal document.
    let good = renderer.job(tikz_sample("\\draw (0,0) -- (1,1);"));
    let outcome = renderer.render(&good).unwrap();
    assert_eq!(outcome.status, RenderStatus::Success, "log: {}", outcome.log);
    let img = outcome.image.expect("success carries an image");
    assert!(!img.png_bytes.is_empty());
    assert!(img.width_px >= 1 && img.height_px >= 1);

    // Malformed document.
    let bad = renderer.job(tikz_sample("\\draw (0,0) -- \\thiscommanddoesnotexist;"));
    let outcome = renderer.render(&bad).unwrap();
    assert_eq!(outcome.status, RenderStatus::CompileFail);

    // Infinite loop hits the timeout within timeout + grace.
    let mut quick = RenderConfig::default();
    quick.workdir_root = workdir_root.clone();
    quick.timeout_s = 5.0;
    let quick_renderer = Renderer::new(quick);
    let spin = quick_renderer.job(tikz_sample("\\loop\\iftrue\\repeat"));
    let outcome = quick_renderer.render(&spin).unwrap();
    assert_eq!(outcome.status, RenderStatus::Timeout);
    assert!(outcome.wall_ms >= 5000, "wall {}", outcome.wall_ms);
    assert!(outcome.wall_ms <= 5000 + 2000, "wall {}", outcome.wall_ms);

    // Workdirs are gone and nothing leaked outside them.
    let after = snapshot(dir.path());
    assert_eq!(before, after, "files escaped the render workdirs");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 90.0, "took {elapsed:?}");
    println!("ACCEPTANCE 5 (render sandbox): PASS in {elapsed:?}");
}

/// 6. Consistency gate: the 20-case agreement table and the calibrated 51-of-100 stub batch.
#[test]
fn acceptance_6_consistency_gate() {
    let started = Instant::now();
    use ExtractedAnswer as A;
    let tol = 1e-6;
    let table: Vec<(A, A, bool)> = vec![
        (A::Numeric(42.0), A::Numeric(42.0), true),
        (A::Numeric(42.0), A::Numeric(42.000001), true),
        (A::Numeric(42.0), A::Numeric(42.1), false),
        (A::Numeric(1.0 / 3.0), A::Numeric(0.33333333), true),
        (A::Numeric(0.75), A::Numeric(3.0 / 4.0), true),
        (A::Numeric(-5.0), A::Numeric(5.0), false),
        (A::Numeric(0.0), A::Numeric(0.0), true),
        (A::Numeric(1e6), A::Numeric(1e6 + 0.5), true),
        (A::Numeric(1.0), A::Numeric(2.0), false),
        (A::Choice('A'), A::Choice('A'), true),
        (A::Choice('A'), A::Choice('B'), false),
        (A::Choice('E'), A::Choice('E'), true),
        (A::Text("two".into()), A::Text("two".into()), true),
        (A::Text("two".into()), A::Text("three".into()), false),
        (A::Proven, A::Proven, true),
        (A::Proven, A::Text("proven it".into()), false),
        (A::None, A::None, false),
        (A::None, A::Numeric(1.0), false),
        (A::Numeric(2.0), A::Choice('B'), false),
        (A::Choice('C'), A::Text("c".into()), false),
    ];
    assert_eq!(table.len(), 20);
    for (i, (a, b, expected)) in table.iter().enumerate() {
        assert_eq!(answers_agree(a, b, tol), *expected, "table case {i}: {a:?} vs {b:?}");
        assert_eq!(answers_agree(b, a, tol), *expected, "table case {i} symmetric");
    }

    // Calibrated batch: exactly 51 of 100 questions agree.
    let dir = tempfile::TempDir::new().unwrap();
    let pair = stub_pair(dir.path());
    let mut math_fixtures = BTreeMap::new();
    let mut general_fixtures = BTreeMap::new();
    let questions: Vec<SynthQuestion> = (0..100)
        .map(|i| SynthQuestion {
            question_id: format!("q-{i:03}"),
            text: format!("What is the value of marker {i}?"),
            source_pair_id: pair.pair_id.clone(),
            dialect: Dialect::Tikz,
        })
        .collect();
    for (i, q) in questions.iter().enumerate() {
        let slots: BTreeMap<String, String> = [
            ("dialect_name".to_string(), "TikZ".to_string()),
            ("code".to_string(), pair.code.text.clone()),
            ("question".to_string(), q.text.clone()),
        ]
        .into();
        let rendered = render_parts(TemplateId::Solve, &slots).unwrap();
        let key = stub_request_key(TemplateId::Solve, &rendered.user, None, 0, 0.0);
        math_fixtures.insert(key.clone(), format!("Solving.\n\\boxed{{{i}}}"));
        let general_answer = if i < 51 { i } else { i + 1000 };
        general_fixtures.insert(key, format!("Independent work.\n\\boxed{{{general_answer}}}"));
    }
    let mut math_cfg = StubConfig::default();
    math_cfg.fixtures = math_fixtures;
    let mut general_cfg = StubConfig::default();
    general_cfg.fixtures = general_fixtures;
    let gate = ModelGate::new(vec![
        EndpointConfig::stub_with("solver-math", math_cfg),
        EndpointConfig::stub_with("solver-general", general_cfg),
    ]);

    let mut accepted = 0u64;
    let mut solved = 0u64;
    for q in &questions {
        let (s, g) = solve_dual(q, &pair, &gate, "solver-math", "solver-general", 0.0);
        solved += 1;
        if accept_sample(q, &s, &g, &pair, tol).is_some() {
            accepted += 1;
        }
    }
    assert_eq!(solved, 100);
    assert_eq!(accepted, 51);
    let pass_rate = accepted as f64 / solved as f64;
    assert_eq!(pass_rate, 0.51, "pass rate must be exactly 0.51");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!("ACCEPTANCE 6 (consistency gate, 51/100 -> 0.51): PASS in {elapsed:?}");
}

fn stub_pair(dir: &Path) -> PairRecord {
    let code = tikz_sample("\\draw (0,0) rectangle (6,4);");
    let renderer = Renderer::new(RenderConfig::stub());
    let outcome = renderer.render(&renderer.job(code.clone())).unwrap();
    figsynth::pairs::assemble_pair(
        &code,
        &outcome,
        &figsynth::filters::FilterVerdict::Pass,
        0,
        &dir.join("images"),
    )
    .unwrap()
}

fn fixture_corpus_50(dir: &Path) -> PathBuf {
    let img_dir = dir.join("corpus50");
    std::fs::create_dir_all(&img_dir).unwrap();
    for i in 0..50u32 {
        let img = RgbImage::from_fn(40, 36, |x, y| {
            Rgb([
                ((x * 3 + i * 17) % 256) as u8,
                ((y * 11 + i * 7) % 256) as u8,
                ((x * y + i * 31) % 256) as u8,
            ])
        });
        img.save(img_dir.join(format!("fix_{i:03}.png"))).unwrap();
    }
    img_dir
}

fn e2e_config(root: &Path, catalog: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.paths.catalog = catalog.to_path_buf();
    cfg.paths.output_dir = root.join("out");
    cfg.render.workdir_root = root.join("work");
    cfg.checkpoint_every = 10;
    cfg.seed = 7;
    cfg.force_stub_endpoints();
    cfg.normalize();
    cfg
}

/// 7. Stub-mode determinism over a 50-image corpus, including kill-and-resume at every stage boundary.
#[test]
fn acceptance_7_end_to_end_determinism() {
    let started = Instant::now();
    let dir = tempfile::TempDir::new().unwrap();
    let img_dir = fixture_corpus_50(dir.path());
    let catalog_path = dir.path().join("catalog.jsonl");
    {
        let catalog = Catalog::open(&catalog_path).unwrap();
        let report = ingest(&catalog, &img_dir, SourceTag::K12).unwrap();
        assert_eq!(report.ingested.len(), 50);
    }

    // Reference run.
    let ref_root = dir.path().join("ref");
    let ref_cfg = e2e_config(&ref_root, &catalog_path);
    let ref_stats = run_round(&ref_cfg).unwrap();
    assert!(ref_stats.is_conserved());
    let ref_dataset = std::fs::read(ref_cfg.paths.output_dir.join("round_0/dataset.jsonl")).unwrap();
    let ref_manifest =
        std::fs::read(ref_cfg.paths.output_dir.join("round_0/dataset.manifest.json")).unwrap();
    assert!(!ref_dataset.is_empty());

    // Repeated full run is byte-identical.
    let rep_root = dir.path().join("rep");
    let rep_cfg = e2e_config(&rep_root, &catalog_path);
    run_round(&rep_cfg).unwrap();
    assert_eq!(
        std::fs::read(rep_cfg.paths.output_dir.join("round_0/dataset.jsonl")).unwrap(),
        ref_dataset
    );
    assert_eq!(
        std::fs::read(rep_cfg.paths.output_dir.join("round_0/dataset.manifest.json")).unwrap(),
        ref_manifest
    );

    // Kill at every stage boundary (select, each chunk, finalize), resume,
    // and compare bytes. 50 items at checkpoint_every=10: 7 boundaries.
    let mut boundaries_seen = 0usize;
    {
        let probe_root = dir.path().join("probe");
        let probe_cfg = e2e_config(&probe_root, &catalog_path);
        run_round_with_hook(&probe_cfg, &mut |_, _| {
            boundaries_seen += 1;
            HookAction::Continue
        })
        .unwrap();
    }
    assert_eq!(boundaries_seen, 7, "expected select + 5 chunks + finalize");

    for kill_at in 0..boundaries_seen {
        let case_root = dir.path().join(format!("kill{kill_at}"));
        let cfg = e2e_config(&case_root, &catalog_path);
        let mut seen = 0usize;
        let result = run_round_with_hook(&cfg, &mut |_stage, _done| {
            seen += 1;
            if seen == kill_at + 1 {
                HookAction::Abort
            } else {
                HookAction::Continue
            }
        });
        assert!(
            matches!(result, Err(OrchestratorError::Aborted)),
            "boundary {kill_at} did not abort"
        );
        let resumed = resume(&cfg).unwrap().expect("resumable state exists");
        assert_eq!(resumed.pairs_emitted, ref_stats.pairs_emitted);
        assert_eq!(
            std::fs::read(cfg.paths.output_dir.join("round_0/dataset.jsonl")).unwrap(),
            ref_dataset,
            "dataset bytes diverge after kill at boundary {kill_at}"
        );
        assert_eq!(
            std::fs::read(cfg.paths.output_dir.join("round_0/dataset.manifest.json")).unwrap(),
            ref_manifest,
            "manifest bytes diverge after kill at boundary {kill_at}"
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!("ACCEPTANCE 7 (end-to-end determinism + resume): PASS in {elapsed:?}");
}

/// 8. K12 schema acceptance and rejection suite.
#[test]
fn acceptance_8_k12_schema_suite() {
    let started = Instant::now();
    use figsynth::k12::{
        admit_problem, augment, partition_problem_images, validate_processed, K12Error,
        ProcessedProblem, RawProblem,
    };
    use figsynth::corpus::ClassifyConfig;

    let dir = tempfile::TempDir::new().unwrap();
    let img_dir = dir.path().join("imgs");
    std::fs::create_dir_all(&img_dir).unwrap();
    // One real figure, two equation-sized images.
    RgbImage::from_fn(500, 380, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 60]))
        .save(img_dir.join("fig.png"))
        .unwrap();
    RgbImage::from_fn(240, 22, |x, _| Rgb([(x % 200) as u8, 10, 10]))
        .save(img_dir.join("eq1.png"))
        .unwrap();
    RgbImage::from_fn(180, 30, |x, _| Rgb([5, (x % 200) as u8, 99]))
        .save(img_dir.join("eq2.png"))
        .unwrap();
    let catalog = Catalog::open(&dir.path().join("catalog.jsonl")).unwrap();
    let report = ingest(&catalog, &img_dir, SourceTag::K12).unwrap();
    let by_width = |w: u32| {
        report
            .ingested
            .iter()
            .find(|a| a.width_px == w)
            .unwrap()
            .asset_id
            .clone()
    };
    let figure_id = by_width(500);
    let eq1 = by_width(240);
    let eq2 = by_width(180);

    let classify = ClassifyConfig::default();
    let fixture_gate = |problem: &RawProblem, response: &str| {
        let mut cfg = StubConfig::default();
        let slots: BTreeMap<String, String> =
            [("json".to_string(), problem.to_prompt_json())].into();
        let rendered = render_parts(TemplateId::K12Process, &slots).unwrap();
        for nonce in 0..2 {
            let key = stub_request_key(TemplateId::K12Process, &rendered.user, None, nonce, 0.0);
            cfg.fixtures.insert(key, response.to_string());
        }
        ModelGate::new(vec![EndpointConfig::stub_with("k12", cfg)])
    };

    // Conformant fixtures are accepted.
    let mc = RawProblem {
        problem_id: "mc".into(),
        question: "2+2=?".into(),
        option_a: Some("3".into()),
        option_b: Some("4".into()),
        answer1: "B".into(),
        image_refs: vec![figure_id.clone(), eq1.clone()],
        ..RawProblem::default()
    };
    let (figures, equations) = partition_problem_images(&mc, &catalog, &classify).unwrap();
    assert_eq!((figures.len(), equations.len()), (1, 1));
    assert!(admit_problem(&figures).is_pass());
    let good = "### Translation:\n2+2=?\n- A. 3\n- B. 4\n### Step-by-Step Solution:\nAdd.\n### Short Answer:\n[\"B\"]";
    let gate = fixture_gate(&mc, good);
    let processed = augment(&mc, &figures, &gate, "k12").unwrap();
    assert_eq!(processed.short_answers, vec!["B"]);

    let multi = RawProblem {
        problem_id: "multi".into(),
        question: "two parts".into(),
        image_refs: vec![figure_id.clone()],
        ..RawProblem::default()
    };
    let (figs_multi, _) = partition_problem_images(&multi, &catalog, &classify).unwrap();
    let good_multi = "### Translation:\nCompute both values.\n1. first part\n2. second part\n### Step-by-Step Solution:\nWork.\n### Short Answer:\n[\"3\", \"4\"]";
    let gate = fixture_gate(&multi, good_multi);
    let processed = augment(&multi, &figs_multi, &gate, "k12").unwrap();
    assert_eq!(processed.sub_questions.len(), 2);
    assert_eq!(processed.short_answers.len(), 2);

    let proof = RawProblem {
        problem_id: "proof".into(),
        question: "Prove it.".into(),
        image_refs: vec![figure_id.clone()],
        ..RawProblem::default()
    };
    let (figs_proof, _) = partition_problem_images(&proof, &catalog, &classify).unwrap();
    let good_proof = "### Translation:\nProve it.\n### Step-by-Step Solution:\nQED.\n### Short Answer:\n[\"proven\"]";
    let gate = fixture_gate(&proof, good_proof);
    assert!(augment(&proof, &figs_proof, &gate, "k12").is_ok());

    // Rejection: out-of-range MC answer.
    let bad_answer = "### Translation:\n2+2=?\n- A. 3\n- B. 4\n### Step-by-Step Solution:\nAdd.\n### Short Answer:\n[\"F\"]";
    let gate = fixture_gate(&mc, bad_answer);
    assert!(matches!(
        augment(&mc, &figures, &gate, "k12"),
        Err(K12Error::SchemaInvalid(_))
    ));

    // Rejection: answer count mismatch against sub-questions.
    let mismatch = "### Translation:\nCompute both values.\n1. first part\n2. second part\n### Step-by-Step Solution:\nWork.\n### Short Answer:\n[\"3\"]";
    let gate = fixture_gate(&multi, mismatch);
    assert!(matches!(
        augment(&multi, &figs_multi, &gate, "k12"),
        Err(K12Error::SchemaInvalid(_))
    ));

    // Rejection: empty solution.
    let empty_solution = "### Translation:\n2+2=?\n- A. 3\n- B. 4\n### Step-by-Step Solution:\n\n### Short Answer:\n[\"B\"]";
    let gate = fixture_gate(&mc, empty_solution);
    assert!(matches!(
        augment(&mc, &figures, &gate, "k12"),
        Err(K12Error::SchemaInvalid(_))
    ));

    // Rejection: equation-only problems never reach augmentation.
    let eq_only = RawProblem {
        problem_id: "eq-only".into(),
        question: "just equations".into(),
        image_refs: vec![eq1, eq2],
        ..RawProblem::default()
    };
    let (figs_eq, eqs) = partition_problem_images(&eq_only, &catalog, &classify).unwrap();
    assert!(figs_eq.is_empty());
    assert_eq!(eqs.len(), 2);
    assert!(!admit_problem(&figs_eq).is_pass());

    // validate_processed closes the same gaps directly.
    let direct = ProcessedProblem {
        problem_id: "d".into(),
        question_en: "q".into(),
        options: vec!["A. 1".into()],
        sub_questions: vec![],
        solution_cot: "s".into(),
        short_answers: vec!["F".into()],
        figure_refs: vec!["img-x".into()],
    };
    assert!(!validate_processed(&direct).is_pass());

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!("ACCEPTANCE 8 (K12 schema suite): PASS in {elapsed:?}");
}

/// 9. Concurrency bound and order independence of the render pool.
#[test]
fn acceptance_9_concurrency_bound() {
    let started = Instant::now();
    let make_jobs = |renderer: &Renderer| {
        (0..100)
            .map(|i| renderer.job(tikz_sample(&format!("\\draw (0,0) -- ({i},2);"))))
            .collect::<Vec<_>>()
    };
    let mut stub = StubRenderConfig::default();
    stub.work_delay_ms = 2;
    let renderer = Renderer::new(RenderConfig {
        kind: RendererKind::Stub(stub),
        ..RenderConfig::default()
    });

    let mut sorted_digests_per_run = Vec::new();
    for run in 0..5 {
        let (results, stats) = render_all(&renderer, make_jobs(&renderer), 4);
        assert_eq!(results.len(), 100);
        assert!(
            stats.peak_concurrency() <= 4,
            "run {run}: peak {}",
            stats.peak_concurrency()
        );
        let mut digests: Vec<String> = results
            .iter()
            .map(|r| {
                let outcome = r.as_ref().unwrap();
                assert_eq!(outcome.status, RenderStatus::Success);
                outcome.image.as_ref().unwrap().digest.hex.clone()
            })
            .collect();
        digests.sort();
        sorted_digests_per_run.push(digests);
    }
    for run in 1..5 {
        assert_eq!(
            sorted_digests_per_run[0], sorted_digests_per_run[run],
            "run {run} produced different outcomes"
        );
    }

    let elapsed = started.elapsed();
    println!("ACCEPTANCE 9 (concurrency bound + order independence): PASS in {elapsed:?}");
}
