//! Stub renderer: deterministic outcomes from a code-digest fixture table,
//! with synthesized raster output for successes.

use std::collections::BTreeMap;
use std::io::Cursor;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RenderJob, RenderOutcome, RenderStatus, RenderedImage};

/// Hex digest of code text, the fixture key.
pub fn code_digest(code_text: &str) -> String {
    hex::encode(Sha256::digest(code_text.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubOutcomeSpec {
    pub status: RenderStatus,
    #[serde(default)]
    pub log: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StubRenderConfig {
    /// code digest hex -> forced outcome; unlisted codes succeed.
    #[serde(default)]
    pub fixtures: BTreeMap<String, StubOutcomeSpec>,
    /// Sleep per job, to make pool concurrency observable.
    #[serde(default)]
    pub work_delay_ms: u64,
}

pub(super) fn render_stub(cfg: &StubRenderConfig, job: &RenderJob) -> RenderOutcome {
    if cfg.work_delay_ms > 0 {
        std::thread::sleep(std::time::Duration::from_millis(cfg.work_delay_ms));
    }
    let digest = code_digest(&job.code.text);
    if let Some(spec) = cfg.fixtures.get(&digest) {
        let image = (spec.status == RenderStatus::Success).then(|| synth_image(&digest));
        return RenderOutcome {
            code_id: job.code.code_id.clone(),
            dialect: job.code.dialect,
            status: spec.status,
            image,
            log: spec.log.clone(),
            wall_ms: 1,
        };
    }
    RenderOutcome {
        code_id: job.code.code_id.clone(),
        dialect: job.code.dialect,
        status: RenderStatus::Success,
        image: Some(synth_image(&digest)),
        log: String::new(),
        wall_ms: 1,
    }
}

/// A small deterministic raster derived from the code digest: an 8x8 block
/// checkerboard of a digest-derived dark color and a digest-derived light
/// color. The disjoint luma bands keep the image clear of the blank,
/// near-white and black-square thresholds.
fn synth_image(digest_hex: &str) -> RenderedImage {
    let seed = Sha256::digest(digest_hex.as_bytes());
    let a = [seed[0] % 60 + 30, seed[1] % 60 + 30, seed[2] % 60 + 30];
    let b = [seed[3] % 60 + 170, seed[4] % 60 + 170, seed[5] % 60 + 170];
    let img = image::RgbImage::from_fn(48, 48, |x, y| {
        let cell = (x / 8 + y / 8) % 2 == 0;
        let c = if cell { a } else { b };
        // Mix in a per-pixel digest ripple so distinct codes differ widely.
        let ripple = seed[((x + y * 3) % 32) as usize] % 24;
        image::Rgb([
            c[0].saturating_add(ripple),
            c[1].saturating_sub(ripple / 2),
            c[2],
        ])
    });
    let mut png_bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut Cursor::new(&mut png_bytes), image::ImageFormat::Png)
        .expect("in-memory png encode");
    RenderedImage::from_png_bytes(png_bytes).expect("stub png decodes")
}
