//! Image corpus ingestion and cataloging.
//!
//! Ingests image collections from heterogeneous sources into a persistent
//! append-only catalog keyed by content digest, and classifies assets as
//! figures or equations by their dimensions.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Origin of a cataloged image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceTag {
    DatikzSeed,
    K12,
    Textbook,
    Arxiv,
    OpenDataset,
    Synthesized,
}

impl SourceTag {
    pub fn parse(s: &str) -> Option<SourceTag> {
        match s.to_ascii_uppercase().as_str() {
            "DATIKZ_SEED" => Some(SourceTag::DatikzSeed),
            "K12" => Some(SourceTag::K12),
            "TEXTBOOK" => Some(SourceTag::Textbook),
            "ARXIV" => Some(SourceTag::Arxiv),
            "OPEN_DATASET" => Some(SourceTag::OpenDataset),
            "SYNTHESIZED" => Some(SourceTag::Synthesized),
            _ => None,
        }
    }
}

/// Size-based classification of an asset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AssetKind {
    Figure,
    Equation,
    Unknown,
}

/// A collision-resistant digest of decoded pixel content.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContentDigest {
    pub algorithm: String,
    pub hex: String,
}

impl ContentDigest {
    pub fn sha256(bytes: &[u8]) -> ContentDigest {
        let mut h = Sha256::new();
        h.update(bytes);
        ContentDigest {
            algorithm: "sha256".to_string(),
            hex: hex::encode(h.finalize()),
        }
    }

    /// Short prefix used to build readable ids and file names.
    pub fn short(&self) -> &str {
        &self.hex[..16.min(self.hex.len())]
    }
}

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.algorithm, self.hex)
    }
}

/// A raw or rendered image tracked by the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAsset {
    pub asset_id: String,
    pub source: SourceTag,
    pub width_px: u32,
    pub height_px: u32,
    pub digest: ContentDigest,
    pub storage_ref: PathBuf,
    pub kind: AssetKind,
}

/// One line of the catalog file. Skip records carry a reason and zeroed
/// dimensions; asset records never do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub asset_id: String,
    pub source: SourceTag,
    pub width_px: u32,
    pub height_px: u32,
    pub digest_alg: String,
    pub digest_hex: String,
    pub storage_ref: PathBuf,
    pub kind: AssetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_reason: Option<String>,
}

impl CatalogRecord {
    pub fn is_skip(&self) -> bool {
        self.skipped_reason.is_some()
    }

    pub fn to_asset(&self) -> Option<ImageAsset> {
        if self.is_skip() {
            return None;
        }
        Some(ImageAsset {
            asset_id: self.asset_id.clone(),
            source: self.source,
            width_px: self.width_px,
            height_px: self.height_px,
            digest: ContentDigest {
                algorithm: self.digest_alg.clone(),
                hex: self.digest_hex.clone(),
            },
            storage_ref: self.storage_ref.clone(),
            kind: self.kind,
        })
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("root not found: {0}")]
    RootNotFound(PathBuf),
    #[error("catalog write failure: {0}")]
    CatalogWriteFailure(#[from] std::io::Error),
    #[error("catalog record malformed at line {line}: {source}")]
    CatalogMalformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error("empty input")]
    EmptyInput,
}

/// Thresholds for the size-based figure/equation split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub max_equation_height_px: u32,
    pub max_equation_area_px: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        // Inline equation crops are typographically about one text line tall.
        ClassifyConfig {
            max_equation_height_px: 40,
            max_equation_area_px: 6400,
        }
    }
}

/// Classify an asset as EQUATION or FIGURE from its dimensions alone.
///
/// Equations tend to be much smaller than figures: anything at most
/// `max_equation_height_px` tall, or whose area is at most
/// `max_equation_area_px`, counts as an equation.
pub fn classify_asset(asset: &ImageAsset, cfg: &ClassifyConfig) -> AssetKind {
    classify_dims(asset.width_px, asset.height_px, cfg)
}

pub fn classify_dims(width_px: u32, height_px: u32, cfg: &ClassifyConfig) -> AssetKind {
    let area = width_px as u64 * height_px as u64;
    if height_px <= cfg.max_equation_height_px || area <= cfg.max_equation_area_px {
        AssetKind::Equation
    } else {
        AssetKind::Figure
    }
}

/// Digest of decoded pixel content: dimensions plus raw RGBA8 bytes, so
/// equal pixels give equal digests regardless of container metadata.
pub fn digest_pixels(width: u32, height: u32, rgba: &[u8]) -> Result<ContentDigest, CorpusError> {
    if rgba.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let mut h = Sha256::new();
    h.update(width.to_be_bytes());
    h.update(height.to_be_bytes());
    h.update(rgba);
    Ok(ContentDigest {
        algorithm: "sha256".to_string(),
        hex: hex::encode(h.finalize()),
    })
}

/// Decode an image file and digest its pixels.
pub fn digest_image_file(path: &Path) -> Result<(u32, u32, ContentDigest), String> {
    let img = image::open(path).map_err(|e| format!("decode failed: {e}"))?;
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width(), rgba.height());
    let digest = digest_pixels(w, h, rgba.as_raw()).map_err(|e| e.to_string())?;
    Ok((w, h, digest))
}

/// Digest an in-memory decoded image.
pub fn digest_decoded(img: &image::DynamicImage) -> ContentDigest {
    let rgba = img.to_rgba8();
    digest_pixels(rgba.width(), rgba.height(), rgba.as_raw())
        .expect("decoded image has at least one pixel")
}

/// Append-only catalog of image assets, one JSON record per line, with an
/// in-memory digest index for idempotent ingestion.
///
/// Appends are serialized through an internal writer lock; concurrent reads
/// of previously returned assets are safe because records are immutable.
pub struct Catalog {
    path: PathBuf,
    inner: Mutex<CatalogInner>,
}

struct CatalogInner {
    writer: BufWriter<File>,
    digests: HashSet<String>,
    records: Vec<CatalogRecord>,
}

impl Catalog {
    /// Open (or create) a catalog file and load its digest index.
    pub fn open(path: &Path) -> Result<Catalog, CorpusError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut digests = HashSet::new();
        let mut records = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CatalogRecord = serde_json::from_str(&line)
                    .map_err(|e| CorpusError::CatalogMalformed { line: i + 1, source: e })?;
                digests.insert(rec.digest_hex.clone());
                records.push(rec);
            }
        }
        let writer = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(Catalog {
            path: path.to_path_buf(),
            inner: Mutex::new(CatalogInner {
                writer,
                digests,
                records,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_digest(&self, digest_hex: &str) -> bool {
        self.inner.lock().unwrap().digests.contains(digest_hex)
    }

    /// All non-skip assets, optionally restricted to the given sources.
    pub fn assets(&self, sources: Option<&[SourceTag]>) -> Vec<ImageAsset> {
        let inner = self.inner.lock().unwrap();
        inner
            .records
            .iter()
            .filter(|r| !r.is_skip())
            .filter(|r| sources.is_none_or(|s| s.contains(&r.source)))
            .filter_map(|r| r.to_asset())
            .collect()
    }

    pub fn records(&self) -> Vec<CatalogRecord> {
        self.inner.lock().unwrap().records.clone()
    }

    pub fn find_asset(&self, asset_id: &str) -> Option<ImageAsset> {
        let inner = self.inner.lock().unwrap();
        inner
            .records
            .iter()
            .find(|r| r.asset_id == asset_id && !r.is_skip())
            .and_then(|r| r.to_asset())
    }

    /// Append a record unless its digest is already cataloged.
    /// Returns true when the record was written.
    pub fn append_if_new(&self, rec: CatalogRecord) -> Result<bool, CorpusError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.digests.contains(&rec.digest_hex) {
            return Ok(false);
        }
        let line = serde_json::to_string(&rec).expect("catalog record serializes");
        inner.writer.write_all(line.as_bytes())?;
        inner.writer.write_all(b"\n")?;
        inner.writer.flush()?;
        inner.digests.insert(rec.digest_hex.clone());
        inner.records.push(rec);
        Ok(true)
    }
}

/// Outcome of one ingestion batch.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub ingested: Vec<ImageAsset>,
    pub skipped: Vec<(PathBuf, String)>,
    pub already_present: usize,
}

/// Ingest every decodable image file under `root` into the catalog.
///
/// Undecodable files are recorded as skips and never abort the batch.
/// Re-ingesting a directory adds no new digests. Decoding and digesting
/// run on a worker pool; appends stay serialized in file order.
pub fn ingest(catalog: &Catalog, root: &Path, source: SourceTag) -> Result<IngestReport, CorpusError> {
    ingest_with_workers(catalog, root, source, 4)
}

pub fn ingest_with_workers(
    catalog: &Catalog,
    root: &Path,
    source: SourceTag,
    workers: usize,
) -> Result<IngestReport, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::RootNotFound(root.to_path_buf()));
    }
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.retain(|p| {
        matches!(
            p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
            Some("png") | Some("jpg") | Some("jpeg")
        )
    });
    files.sort();

    let decoded = decode_all(&files, workers.max(1));

    let mut report = IngestReport::default();
    for (path, result) in files.into_iter().zip(decoded) {
        match result {
            Ok((w, h, digest)) => {
                let asset_id = format!("img-{}", digest.short());
                let rec = CatalogRecord {
                    asset_id,
                    source,
                    width_px: w,
                    height_px: h,
                    digest_alg: digest.algorithm.clone(),
                    digest_hex: digest.hex.clone(),
                    storage_ref: path.clone(),
                    kind: AssetKind::Unknown,
                    skipped_reason: None,
                };
                let asset = rec.to_asset().expect("non-skip record");
                if catalog.append_if_new(rec)? {
                    report.ingested.push(asset);
                } else {
                    report.already_present += 1;
                }
            }
            Err(reason) => {
                // Digest the raw bytes so repeated runs do not re-record the skip.
                let raw = fs::read(&path)?;
                let digest = ContentDigest::sha256(&raw);
                let rec = CatalogRecord {
                    asset_id: format!("skip-{}", digest.short()),
                    source,
                    width_px: 0,
                    height_px: 0,
                    digest_alg: digest.algorithm.clone(),
                    digest_hex: digest.hex.clone(),
                    storage_ref: path.clone(),
                    kind: AssetKind::Unknown,
                    skipped_reason: Some(reason.clone()),
                };
                if catalog.append_if_new(rec)? {
                    report.skipped.push((path, reason));
                } else {
                    report.already_present += 1;
                }
            }
        }
    }
    Ok(report)
}

type Decoded = Result<(u32, u32, ContentDigest), String>;

fn decode_all(files: &[PathBuf], workers: usize) -> Vec<Decoded> {
    let mut slots: Vec<Option<Decoded>> = Vec::new();
    slots.resize_with(files.len(), || None);
    if files.is_empty() {
        return Vec::new();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..workers.min(files.len()) {
            let next = &next;
            handles.push(scope.spawn(move || {
                let mut results = Vec::new();
                loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= files.len() {
                        return results;
                    }
                    results.push((i, digest_image_file(&files[i])));
                }
            }));
        }
        for handle in handles {
            for (i, result) in handle.join().expect("decode worker") {
                slots[i] = Some(result);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every file decoded"))
        .collect()
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CorpusError> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
