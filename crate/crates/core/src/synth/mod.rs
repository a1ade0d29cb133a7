//! Synthetic "stamped" images: a prototype logo is recoloured, warped and
//! alpha-blended into a background photo, and the warped hull becomes the
//! ground-truth box.
//!
//! Every sample draws from its own ChaCha8 stream selected by
//! `(seed, sample index)`, so outputs do not depend on scheduling.

pub mod assets;
pub mod geometry;
pub mod photometric;

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::format::{read_jsonl, write_file, write_jsonl};
use crate::par::{self, Exec};

pub use geometry::{
    homography_from_params, random_homography, warp_composite, GeometricParams, Homography,
    MIN_STAMP_AREA,
};
pub use photometric::{blur_plane, gaussian_kernel, photometric_chain, PhotometricParams};

pub(crate) fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub per_class: usize,
    /// Longest logo side as a fraction of the shortest background side.
    pub scale: [f64; 2],
    pub rotation_deg: [f64; 2],
    /// Largest corner displacement as a fraction of the scaled short logo side.
    pub perspective: f64,
    pub hue_shift_deg: [f64; 2],
    pub saturation: [f64; 2],
    pub brightness: [f64; 2],
    pub invert_probability: f64,
    pub gradient_strength: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub alpha: [f64; 2],
    pub max_attempts: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            per_class: 10,
            scale: [0.08, 0.5],
            rotation_deg: [-25.0, 25.0],
            perspective: 0.15,
            hue_shift_deg: [-20.0, 20.0],
            saturation: [0.7, 1.3],
            brightness: [0.5, 1.6],
            invert_probability: 0.1,
            gradient_strength: [0.0, 0.4],
            blur_sigma: [0.0, 2.5],
            alpha: [0.6, 1.0],
            max_attempts: 8,
            exec: Exec::default(),
        }
    }
}

impl SynthConfig {
    /// All transforms collapsed to identity, except the scale range which is
    /// left as the default and should be pinned by the caller.
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0, 0.0],
            perspective: 0.0,
            hue_shift_deg: [0.0, 0.0],
            saturation: [1.0, 1.0],
            brightness: [1.0, 1.0],
            invert_probability: 0.0,
            gradient_strength: [0.0, 0.0],
            blur_sigma: [0.0, 0.0],
            alpha: [1.0, 1.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("scale", self.scale, 0.0, f64::INFINITY),
            ("rotation_deg", self.rotation_deg, -180.0, 180.0),
            ("hue_shift_deg", self.hue_shift_deg, -180.0, 180.0),
            ("saturation", self.saturation, 0.0, f64::INFINITY),
            ("brightness", self.brightness, 0.0, f64::INFINITY),
            ("gradient_strength", self.gradient_strength, 0.0, 1.0),
            ("blur_sigma", self.blur_sigma, 0.0, 50.0),
            ("alpha", self.alpha, 0.0, 1.0),
        ];
        for (name, [lo, hi], min, max) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max) {
                return Err(Error::Invalid(format!(
                    "{name} range [{lo}, {hi}] must be ordered within [{min}, {max}]"
                )));
            }
        }
        if !(self.scale[0] > 0.0) {
            return Err(Error::Invalid("scale must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.perspective) {
            return Err(Error::Invalid(format!("perspective {} outside [0, 0.5)", self.perspective)));
        }
        if !(0.0..=1.0).contains(&self.invert_probability) {
            return Err(Error::Invalid(format!(
                "invert_probability {} outside [0, 1]",
                self.invert_probability
            )));
        }
        if self.max_attempts == 0 || self.per_class == 0 {
            return Err(Error::Invalid("max_attempts and per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Everything sampled for one stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub attempt: usize,
    pub alpha: f64,
    pub photometric: PhotometricParams,
    pub geometric: GeometricParams,
    pub homography: Homography,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampRecord {
    pub sample: u64,
    /// Image path relative to the manifest directory.
    pub image: String,
    pub class: String,
    pub bbox: BBox,
    pub params: StampParams,
}

#[derive(Debug, Clone)]
pub struct Stamp {
    pub image: RgbaImage,
    pub bbox: BBox,
    pub params: StampParams,
}

/// Recolours `logo` and stamps it into `background`, resampling placement
/// after out-of-frame draws up to `config.max_attempts` times.
pub fn generate_sample<R: Rng>(
    background: &RgbaImage,
    logo: &RgbaImage,
    rng: &mut R,
    config: &SynthConfig,
) -> Result<Stamp> {
    let mut last = Error::DegenerateQuad;
    for attempt in 0..config.max_attempts {
        let photometric = PhotometricParams::sample(rng, config);
        let alpha = uniform(rng, config.alpha);
        let (homography, geometric) = match random_homography(
            rng,
            logo.dimensions(),
            background.dimensions(),
            config,
        ) {
            Ok(v) => v,
            Err(e) => {
                last = e;
                continue;
            }
        };
        let styled = photometric_chain(logo, &photometric);
        match warp_composite(background, &styled, &homography, alpha) {
            Ok((image, bbox)) => {
                return Ok(Stamp {
                    image,
                    bbox,
                    params: StampParams {
                        background: None,
                        variant: None,
                        attempt,
                        alpha,
                        photometric,
                        geometric,
                        homography,
                    },
                })
            }
            Err(e @ Error::OutOfFrame { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// One line of a logos manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogoEntry {
    pub class: String,
    pub variant: String,
    pub path: String,
}

pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbaImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgba8())
}

pub fn load_png(path: &Path) -> Result<RgbaImage> {
    decode_png(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_png(img: &RgbaImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_png(path: &Path, img: &RgbaImage) -> Result<()> {
    write_file(path, &encode_png(img)?)
}

/// Resolves `path` against `base` unless it is absolute.
pub fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Logo paths grouped by class, each entry a `(variant, path)` pair.
pub type LogoClasses = Vec<(String, Vec<(String, PathBuf)>)>;

/// Reads a logos manifest and groups its entries by class in order of first
/// appearance. Paths are resolved against the manifest directory.
pub fn load_logos(manifest: &Path) -> Result<LogoClasses> {
    let entries: Vec<LogoEntry> = read_jsonl(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut order: LogoClasses = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for e in entries {
        let i = *slot.entry(e.class.clone()).or_insert_with(|| {
            order.push((e.class.clone(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push((e.variant, resolve(base, &e.path)));
    }
    Ok(order)
}

/// Sorted `*.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|s| s.to_str())
            .is_some_and(|s| s.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "synth_config.json";

pub fn sample_image_name(index: u64) -> String {
    format!("images/s{index:07}.png")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub generated: usize,
    pub reused: usize,
    pub skipped: usize,
}

/// Stamps `config.per_class` samples for every logo class and writes
/// `images/sNNNNNNN.png` plus a manifest under `out_dir`.
///
/// Sample `i` belongs to class `i / per_class`; background and variant are
/// drawn from the sample's own stream. Samples whose image and manifest
/// record already exist are kept as they are, so reruns only fill gaps.
pub fn generate_dataset(
    backgrounds_dir: &Path,
    logos_manifest: &Path,
    config: &SynthConfig,
    out_dir: &Path,
) -> Result<(Vec<StampRecord>, DatasetSummary)> {
    config.validate()?;
    let backgrounds = list_pngs(backgrounds_dir)?;
    if backgrounds.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no PNG backgrounds in {}",
            backgrounds_dir.display()
        )));
    }
    let classes = load_logos(logos_manifest)?;
    if classes.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no logos in {}",
            logos_manifest.display()
        )));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut existing: BTreeMap<u64, StampRecord> = BTreeMap::new();
    if manifest_path.exists() {
        match read_jsonl::<StampRecord>(&manifest_path) {
            Ok(records) => existing.extend(records.into_iter().map(|r| (r.sample, r))),
            Err(e) => tracing::warn!(error = %e, "ignoring unreadable manifest"),
        }
    }

    let total = (classes.len() * config.per_class) as u64;
    let indices: Vec<u64> = (0..total).collect();
    let outcomes = par::map(config.exec, &indices, |&index| -> Result<Outcome> {
        let name = sample_image_name(index);
        if let Some(r) = existing.get(&index) {
            if r.image == name && out_dir.join(&name).is_file() {
                return Ok(Outcome::Reused(r.clone()));
            }
        }
        let (class, variants) = &classes[index as usize / config.per_class];
        let mut rng = sample_rng(config.seed, index);
        let bg_path = &backgrounds[rng.random_range(0..backgrounds.len())];
        let (variant, logo_path) = &variants[rng.random_range(0..variants.len())];
        let background = load_png(bg_path)?;
        let logo = load_png(logo_path)?;
        match generate_sample(&background, &logo, &mut rng, config) {
            Ok(stamp) => {
                save_png(&out_dir.join(&name), &stamp.image)?;
                let mut params = stamp.params;
                params.background = bg_path.file_name().map(|s| s.to_string_lossy().into_owned());
                params.variant = Some(variant.clone());
                Ok(Outcome::Generated(StampRecord {
                    sample: index,
                    image: name,
                    class: class.clone(),
                    bbox: stamp.bbox,
                    params,
                }))
            }
            Err(e @ (Error::OutOfFrame { .. } | Error::DegenerateQuad)) => {
                tracing::warn!(sample = index, class = %class, error = %e, "sample skipped");
                Ok(Outcome::Skipped)
            }
            Err(e) => Err(e),
        }
    });

    let mut records = Vec::new();
    let mut summary = DatasetSummary::default();
    for outcome in outcomes {
        match outcome? {
            Outcome::Generated(r) => {
                summary.generated += 1;
                records.push(r);
            }
            Outcome::Reused(r) => {
                summary.reused += 1;
                records.push(r);
            }
            Outcome::Skipped => summary.skipped += 1,
        }
    }
    write_jsonl(&manifest_path, &records)?;
    let config_path = out_dir.join(CONFIG_FILE);
    write_file(&config_path, serde_json::to_string_pretty(config)?.as_bytes())?;
    tracing::info!(
        generated = summary.generated,
        reused = summary.reused,
        skipped = summary.skipped,
        "dataset written"
    );
    Ok((records, summary))
}

enum Outcome {
    Generated(StampRecord),
    Reused(StampRecord),
    Skipped,
}
