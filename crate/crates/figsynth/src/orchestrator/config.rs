//! Pipeline configuration: one structured file covering endpoints, roles,
//! thresholds, pool widths and paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ClassifyConfig, SourceTag};
use crate::filters::FilterConfig;
use crate::modelgate::{Dialect, EndpointConfig, EndpointKind, StubConfig};
use crate::render::{RenderConfig, RendererKind, StubRenderConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub catalog: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub banlist: Option<PathBuf>,
    #[serde(default)]
    pub holdout_keys: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            catalog: PathBuf::from("catalog.jsonl"),
            output_dir: PathBuf::from("out"),
            banlist: None,
            holdout_keys: None,
        }
    }
}

/// Which configured endpoint plays which role.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleMap {
    pub image_to_code: String,
    pub translator: String,
    pub question_gen: String,
    pub solver_math: String,
    pub solver_general: String,
    pub k12_processor: String,
}

impl Default for RoleMap {
    fn default() -> Self {
        RoleMap {
            image_to_code: "i2c".to_string(),
            translator: "translator".to_string(),
            question_gen: "question-gen".to_string(),
            solver_math: "solver-math".to_string(),
            solver_general: "solver-general".to_string(),
            k12_processor: "k12".to_string(),
        }
    }
}

impl RoleMap {
    pub fn all_ids(&self) -> Vec<&str> {
        vec![
            &self.image_to_code,
            &self.translator,
            &self.question_gen,
            &self.solver_math,
            &self.solver_general,
            &self.k12_processor,
        ]
    }
}

/// Share of assets sent to each dialect, decided per asset by digest hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DialectMix {
    pub tikz_weight: u32,
    pub plot_weight: u32,
}

impl Default for DialectMix {
    fn default() -> Self {
        DialectMix {
            tikz_weight: 1,
            plot_weight: 0,
        }
    }
}

impl DialectMix {
    pub fn assign(&self, digest_hex: &str) -> Dialect {
        let total = self.tikz_weight + self.plot_weight;
        if total == 0 || self.plot_weight == 0 {
            return Dialect::Tikz;
        }
        if self.tikz_weight == 0 {
            return Dialect::PlotScript;
        }
        let h = Sha256::digest(digest_hex.as_bytes());
        let v = u32::from_be_bytes([h[0], h[1], h[2], h[3]]) % total;
        if v < self.tikz_weight {
            Dialect::Tikz
        } else {
            Dialect::PlotScript
        }
    }
}

/// One image-to-code round.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundSettings {
    pub round_index: u32,
    pub sources: Vec<SourceTag>,
    #[serde(default)]
    pub sample_cap: Option<usize>,
    #[serde(default)]
    pub dialect_mix: DialectMix,
    pub temperature: f64,
    pub pool_width: usize,
    pub max_tokens: u32,
}

impl Default for RoundSettings {
    fn default() -> Self {
        RoundSettings {
            round_index: 0,
            sources: vec![
                SourceTag::DatikzSeed,
                SourceTag::K12,
                SourceTag::Textbook,
                SourceTag::Arxiv,
                SourceTag::OpenDataset,
            ],
            sample_cap: None,
            dialect_mix: DialectMix::default(),
            temperature: 0.0,
            pool_width: 4,
            max_tokens: crate::modelgate::DEFAULT_MAX_TOKENS,
        }
    }
}

/// Problem-synthesis settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub sources: Vec<SourceTag>,
    #[serde(default)]
    pub sample_cap: Option<usize>,
    pub attempts_per_seed: u32,
    pub dialect: Dialect,
    /// Sampling temperature for new-figure generation.
    pub temperature: f64,
    pub solver_temperature: f64,
    pub agreement_tol: f64,
    pub pool_width: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            sources: vec![SourceTag::K12],
            sample_cap: None,
            attempts_per_seed: 1,
            dialect: Dialect::Tikz,
            temperature: 0.7,
            solver_temperature: 0.0,
            agreement_tol: 1e-6,
            pool_width: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OcrSettings {
    Stub {
        #[serde(default)]
        fixtures: std::collections::BTreeMap<String, String>,
    },
    Http {
        base_url: String,
    },
}

impl Default for OcrSettings {
    fn default() -> Self {
        OcrSettings::Stub {
            fixtures: Default::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct K12Settings {
    pub pool_width: usize,
    #[serde(default)]
    pub ocr: OcrSettings,
}

impl Default for K12Settings {
    fn default() -> Self {
        K12Settings {
            pool_width: 4,
            ocr: OcrSettings::default(),
        }
    }
}

/// The whole pipeline configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub classify: ClassifyConfig,
    pub filters: FilterConfig,
    /// Separate chain config for post-filtering accepted problem records.
    pub post_filters: PostFilterConfig,
    pub render: RenderConfig,
    pub endpoints: Vec<EndpointConfig>,
    pub roles: RoleMap,
    pub round: RoundSettings,
    pub synth: SynthSettings,
    pub k12: K12Settings,
    pub emit_order: crate::pairs::EmitOrder,
    pub checkpoint_every: usize,
    pub seed: u64,
}

/// Dedup plus length cap applied to accepted problem records.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PostFilterConfig {
    pub max_record_chars: usize,
}

impl Default for PostFilterConfig {
    fn default() -> Self {
        PostFilterConfig {
            max_record_chars: 8000,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("read config: {e}"))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| format!("parse config: {e}"))?;
        cfg.normalize();
        Ok(cfg)
    }

    /// Fill defaults that need cross-field knowledge.
    pub fn normalize(&mut self) {
        if self.checkpoint_every == 0 {
            self.checkpoint_every = 1000;
        }
        if self.endpoints.is_empty() {
            self.force_stub_endpoints();
        }
        if let Some(banlist) = &self.paths.banlist {
            if let Ok(keywords) = crate::filters::load_banlist(banlist) {
                self.filters.banned_keywords = keywords;
            }
        }
    }

    /// Replace every configured endpoint (and the renderer) with the
    /// deterministic stub kind, keeping ids and limits.
    pub fn force_stub_endpoints(&mut self) {
        let mut seen: Vec<String> = self.endpoints.iter().map(|e| e.id.clone()).collect();
        for e in &mut self.endpoints {
            if !matches!(e.kind, EndpointKind::Stub(_)) {
                e.kind = EndpointKind::Stub(StubConfig::default());
            }
        }
        for id in self.roles.all_ids() {
            if !seen.iter().any(|s| s == id) {
                self.endpoints.push(EndpointConfig::stub(id));
                seen.push(id.to_string());
            }
        }
        if !matches!(self.render.kind, RendererKind::Stub(_)) {
            self.render.kind = RendererKind::Stub(StubRenderConfig::default());
        }
        if !matches!(self.k12.ocr, OcrSettings::Stub { .. }) {
            self.k12.ocr = OcrSettings::default();
        }
    }

    /// Stable digest of the effective processing configuration. Filesystem
    /// locations are redacted: where inputs and outputs live must not
    /// change what gets produced.
    pub fn digest(&self) -> String {
        let mut redacted = self.clone();
        redacted.paths = PathsConfig::default();
        redacted.render.workdir_root = PathBuf::new();
        let canonical = serde_json::to_string(&redacted).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
