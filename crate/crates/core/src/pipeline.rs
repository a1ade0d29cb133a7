//! Second-layer inference over externally produced region proposals.
//!
//! Each proposal is cropped and resized to a square, turned into a feature
//! map (by the built-in toy featurizer or from precomputed `.fmap` files),
//! pooled, embedded with the trained head and matched against the prototype
//! index. The detection score is the retrieval similarity; the proposal's
//! objectness is carried along untouched.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use image::RgbaImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::descriptor::{
    apply_affine, l2_normalize, pool, AffineHead, Descriptor, FeatureMap, Pooling, WhitenTransform,
};
use crate::error::{Error, Result};
use crate::eval::{BBox, Detection};
use crate::format::{read_feature_map, read_jsonl};
use crate::index::{Prototype, PrototypeIndex};
use crate::par::{self, Exec};
use crate::synth::{load_png, resolve, LogoEntry, StampRecord};
use crate::train::TrainingSample;

pub const DEFAULT_CROP: u32 = 224;
pub const DEFAULT_THRESHOLD: f64 = 0.45;
pub const TOY_GRID: usize = 7;
pub const TOY_CHANNELS: usize = 128;
pub const TOY_SEED: u64 = 0x70F0_5EED;
/// Statistics per grid cell: mean, variance, horizontal and vertical
/// gradient energy, each for R, G and B.
pub const CELL_STATS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "image")]
    pub image_id: String,
    pub bbox: BBox,
    pub objectness: f64,
}

/// Crops `bbox` (clipped to the image) and bilinearly resizes it to
/// `size x size`, ignoring aspect ratio. Samples outside the integer crop
/// window are clamped to its edge.
pub fn crop_resize(image: &RgbaImage, bbox: &BBox, size: u32) -> Result<RgbaImage> {
    if size == 0 {
        return Err(Error::Invalid("crop size must be positive".into()));
    }
    let b = bbox
        .clip(image.width() as f64, image.height() as f64)
        .filter(|b| b.area() > 0.0)
        .ok_or(Error::EmptyCrop)?;
    let wx0 = b.x_min.floor() as i64;
    let wy0 = b.y_min.floor() as i64;
    let wx1 = (b.x_max.ceil() as i64 - 1).max(wx0);
    let wy1 = (b.y_max.ceil() as i64 - 1).max(wy0);
    let sx = b.width() / size as f64;
    let sy = b.height() / size as f64;
    let texel = |x: i64, y: i64, c: usize| -> f64 {
        image.get_pixel(x.clamp(wx0, wx1) as u32, y.clamp(wy0, wy1) as u32).0[c] as f64
    };
    let mut out = RgbaImage::new(size, size);
    // Coordinates relative to the window origin.
    let (ox, oy) = (b.x_min - wx0 as f64, b.y_min - wy0 as f64);
    for (i, j, px) in out.enumerate_pixels_mut() {
        let fx = ox + (i as f64 + 0.5) * sx - 0.5;
        let fy = oy + (j as f64 + 0.5) * sy - 0.5;
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0, fy - y0);
        let (x0, y0) = (x0 as i64 + wx0, y0 as i64 + wy0);
        for c in 0..4 {
            let top = texel(x0, y0, c) * (1.0 - tx) + texel(x0 + 1, y0, c) * tx;
            let bottom = texel(x0, y0 + 1, c) * (1.0 - tx) + texel(x0 + 1, y0 + 1, c) * tx;
            px.0[c] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Half-open pixel range of cell `i` out of `g` along a side of `n` pixels.
fn cell_span(i: usize, g: usize, n: usize) -> (usize, usize) {
    (i * n / g, ((i + 1) * n / g).max(i * n / g + 1).min(n.max(1)))
}

/// Per-cell statistics on a `g x g` grid, cells in row-major order. Channel
/// values are scaled to `[0, 1]`; gradients are forward differences with the
/// last row and column repeated.
pub fn cell_statistics(crop: &RgbaImage, g: usize) -> Vec<[f64; CELL_STATS]> {
    let (w, h) = (crop.width() as usize, crop.height() as usize);
    let v = |x: usize, y: usize, c: usize| crop.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0;
    let mut out = Vec::with_capacity(g * g);
    for cy in 0..g {
        let (y0, y1) = cell_span(cy, g, h);
        for cx in 0..g {
            let (x0, x1) = cell_span(cx, g, w);
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let mut s = [0.0; CELL_STATS];
            for c in 0..3 {
                let (mut sum, mut sq, mut gx, mut gy) = (0.0, 0.0, 0.0, 0.0);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = v(x, y, c);
                        sum += p;
                        sq += p * p;
                        let dx = v((x + 1).min(w - 1), y, c) - p;
                        let dy = v(x, (y + 1).min(h - 1), c) - p;
                        gx += dx * dx;
                        gy += dy * dy;
                    }
                }
                let mean = sum / n;
                s[c] = mean;
                s[3 + c] = (sq / n - mean * mean).max(0.0);
                s[6 + c] = gx / n;
                s[9 + c] = gy / n;
            }
            out.push(s);
        }
    }
    out
}

/// Deterministic stand-in for a convolutional backbone: grid statistics
/// mapped to `channels` dimensions by a fixed Gaussian matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFeaturizer {
    grid: usize,
    channels: usize,
    /// `channels x CELL_STATS`, row-major.
    projection: Vec<f64>,
}

impl ToyFeaturizer {
    pub fn new(grid: usize, channels: usize, seed: u64) -> Result<Self> {
        if grid == 0 || channels < CELL_STATS {
            return Err(Error::Invalid(format!(
                "toy featurizer needs grid >= 1 and channels >= {CELL_STATS}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (CELL_STATS as f64).sqrt();
        let projection = (0..channels * CELL_STATS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            grid,
            channels,
            projection,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn featurize(&self, crop: &RgbaImage) -> FeatureMap {
        let stats = cell_statistics(crop, self.grid);
        let mut fm = FeatureMap::zeros(self.grid, self.grid, self.channels);
        for (i, s) in stats.iter().enumerate() {
            let cell = fm.cell_mut(i % self.grid, i / self.grid);
            for (k, out) in cell.iter_mut().enumerate() {
                let row = &self.projection[k * CELL_STATS..(k + 1) * CELL_STATS];
                *out = row.iter().zip(s).map(|(a, b)| a * b).sum();
            }
        }
        fm
    }
}

impl Default for ToyFeaturizer {
    fn default() -> Self {
        Self::new(TOY_GRID, TOY_CHANNELS, TOY_SEED).expect("valid defaults")
    }
}

/// Key for a precomputed map: image id plus the exact bbox bits.
type MapKey = (String, [u64; 4]);

fn map_key(image_id: &str, bbox: &BBox) -> MapKey {
    (image_id.to_string(), bbox.to_array().map(f64::to_bits))
}

#[derive(Debug, Clone, Deserialize)]
struct FmapEntry {
    image: String,
    bbox: BBox,
    fmap: String,
}

#[derive(Debug, Clone)]
pub enum FeaturizerBackend {
    Toy(ToyFeaturizer),
    Precomputed(HashMap<MapKey, PathBuf>),
}

impl FeaturizerBackend {
    /// Reads a JSONL map of `{"image", "bbox", "fmap"}`; relative `fmap`
    /// paths are resolved against the map's directory.
    pub fn precomputed(map: &Path) -> Result<Self> {
        let base = map.parent().unwrap_or(Path::new("."));
        let entries: Vec<FmapEntry> = read_jsonl(map)?;
        Ok(Self::Precomputed(
            entries
                .into_iter()
                .map(|e| (map_key(&e.image, &e.bbox), resolve(base, &e.fmap)))
                .collect(),
        ))
    }

    pub fn needs_pixels(&self) -> bool {
        matches!(self, Self::Toy(_))
    }

    /// Feature map of the region; `image` is only read by the toy backend.
    pub fn feature_map(
        &self,
        image_id: &str,
        image: Option<&RgbaImage>,
        bbox: &BBox,
        crop_size: u32,
    ) -> Result<FeatureMap> {
        match self {
            Self::Toy(toy) => {
                let image = image.ok_or_else(|| Error::Invalid("toy backend needs pixels".into()))?;
                Ok(toy.featurize(&crop_resize(image, bbox, crop_size)?))
            }
            Self::Precomputed(map) => {
                let path = map.get(&map_key(image_id, bbox)).ok_or_else(|| Error::MissingFeatureMap {
                    image: image_id.to_string(),
                    bbox: bbox.to_array(),
                })?;
                read_feature_map(path)
            }
        }
    }
}

/// Everything that turns a region into a query descriptor.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub backend: FeaturizerBackend,
    pub head: AffineHead,
    pub whitening: Option<WhitenTransform>,
    pub pooling: Pooling,
    pub crop_size: u32,
}

impl Embedder {
    pub fn new(backend: FeaturizerBackend, head: AffineHead) -> Self {
        Self {
            backend,
            head,
            whitening: None,
            pooling: Pooling::Max,
            crop_size: DEFAULT_CROP,
        }
    }

    /// The l2-normalized pooled feature, i.e. the head's input.
    pub fn pooled_input(&self, image_id: &str, image: Option<&RgbaImage>, bbox: &BBox) -> Result<Descriptor> {
        let fm = self.backend.feature_map(image_id, image, bbox, self.crop_size)?;
        l2_normalize(&pool(&fm, self.pooling)?)
    }

    /// Head output, normalized, then whitened and re-normalized when a
    /// whitening transform is set.
    pub fn embed_input(&self, input: &Descriptor) -> Result<Descriptor> {
        let embedded = l2_normalize(&apply_affine(&self.head, input)?)?;
        match &self.whitening {
            Some(w) => w.apply_normalized(&embedded),
            None => Ok(embedded),
        }
    }

    pub fn describe(&self, image_id: &str, image: Option<&RgbaImage>, bbox: &BBox) -> Result<Descriptor> {
        self.embed_input(&self.pooled_input(image_id, image, bbox)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Proposals kept per image, highest objectness first; `None` keeps all.
    pub top_n: Option<usize>,
    pub threshold: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_n: None,
            threshold: DEFAULT_THRESHOLD,
            exec: Exec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::Invalid(format!("threshold {} outside [-1, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub proposals: usize,
    pub classified: usize,
    pub rejected_by_threshold: usize,
    pub empty_crops: usize,
}

impl PipelineSummary {
    fn merge(&mut self, o: &PipelineSummary) {
        self.proposals += o.proposals;
        self.classified += o.classified;
        self.rejected_by_threshold += o.rejected_by_threshold;
        self.empty_crops += o.empty_crops;
    }
}

/// Classifies one proposal. `Ok(None)` means the best similarity fell below
/// the threshold.
pub fn classify_proposal(
    image: Option<&RgbaImage>,
    proposal: &Proposal,
    embedder: &Embedder,
    index: &PrototypeIndex,
    config: &PipelineConfig,
) -> Result<Option<Detection>> {
    if index.is_empty() {
        return Err(Error::EmptyInput("prototype index is empty".into()));
    }
    let query = embedder.describe(&proposal.image_id, image, &proposal.bbox)?;
    Ok(index
        .query_topclass(&query, config.threshold)?
        .map(|(class_id, score)| Detection {
            image_id: proposal.image_id.clone(),
            bbox: proposal.bbox,
            class_id,
            score,
            objectness: Some(proposal.objectness),
        }))
}

/// Indices of the proposals to process, in input order: the `top_n` with
/// highest objectness, earlier proposals winning ties.
pub fn select_top_n(proposals: &[&Proposal], top_n: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    if let Some(n) = top_n {
        order.sort_by(|&a, &b| proposals[b].objectness.total_cmp(&proposals[a].objectness).then(a.cmp(&b)));
        order.truncate(n);
        order.sort_unstable();
    }
    order
}

fn run_image(
    images_dir: &Path,
    image_id: &str,
    proposals: &[&Proposal],
    embedder: &Embedder,
    index: &PrototypeIndex,
    config: &PipelineConfig,
) -> Result<(Vec<Detection>, PipelineSummary)> {
    let image = if embedder.backend.needs_pixels() {
        Some(load_png(&images_dir.join(image_id))?)
    } else {
        None
    };
    let mut dets = Vec::new();
    let mut summary = PipelineSummary::default();
    for i in select_top_n(proposals, config.top_n) {
        summary.proposals += 1;
        match classify_proposal(image.as_ref(), proposals[i], embedder, index, config) {
            Ok(Some(d)) => {
                summary.classified += 1;
                dets.push(d);
            }
            Ok(None) => summary.rejected_by_threshold += 1,
            Err(Error::EmptyCrop) => {
                tracing::warn!(image = image_id, bbox = ?proposals[i].bbox.to_array(), "empty crop");
                summary.empty_crops += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((dets, summary))
}

/// Runs every proposal through the second layer. Images are processed
/// concurrently; output is ordered by image id, then proposal order.
pub fn run_pipeline(
    images_dir: &Path,
    proposals: &[Proposal],
    embedder: &Embedder,
    index: &PrototypeIndex,
    config: &PipelineConfig,
) -> Result<(Vec<Detection>, PipelineSummary)> {
    config.validate()?;
    let mut by_image: BTreeMap<&str, Vec<&Proposal>> = BTreeMap::new();
    for p in proposals {
        by_image.entry(p.image_id.as_str()).or_default().push(p);
    }
    let groups: Vec<(&str, Vec<&Proposal>)> = by_image.into_iter().collect();
    let results = par::map(config.exec, &groups, |(image_id, props)| {
        run_image(images_dir, image_id, props, embedder, index, config)
    });
    let mut detections = Vec::new();
    let mut summary = PipelineSummary::default();
    for r in results {
        let (dets, s) = r?;
        detections.extend(dets);
        summary.merge(&s);
    }
    Ok((detections, summary))
}

fn full_frame(image: &RgbaImage) -> Result<BBox> {
    BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64)
}

/// One prototype per logos-manifest entry, described from the whole logo
/// image. The image id used by precomputed backends is the entry's `path`.
pub fn prototypes_from_logos(manifest: &Path, embedder: &Embedder, exec: Exec) -> Result<Vec<Prototype>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<LogoEntry> = read_jsonl(manifest)?;
    par::map(exec, &entries, |e| {
        let image = load_png(&resolve(base, &e.path))?;
        let desc = embedder.describe(&e.path, Some(&image), &full_frame(&image)?)?;
        let mut p = Prototype::new(e.class.clone(), e.variant.clone(), desc);
        p.metadata.insert("path".into(), e.path.clone());
        Ok(p)
    })
    .into_iter()
    .collect()
}

/// Head inputs for the logos themselves, labelled by class.
pub fn logo_samples(manifest: &Path, embedder: &Embedder, exec: Exec) -> Result<Vec<TrainingSample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<LogoEntry> = read_jsonl(manifest)?;
    par::map(exec, &entries, |e| {
        let image = load_png(&resolve(base, &e.path))?;
        Ok(TrainingSample {
            class_id: e.class.clone(),
            input: embedder.pooled_input(&e.path, Some(&image), &full_frame(&image)?)?,
        })
    })
    .into_iter()
    .collect()
}

/// Head inputs for the ground-truth crops of a stamped dataset.
pub fn dataset_samples(
    dataset_dir: &Path,
    records: &[StampRecord],
    embedder: &Embedder,
    exec: Exec,
) -> Result<Vec<TrainingSample>> {
    par::map(exec, records, |r| {
        let image = if embedder.backend.needs_pixels() {
            Some(load_png(&dataset_dir.join(&r.image))?)
        } else {
            None
        };
        Ok(TrainingSample {
            class_id: r.class.clone(),
            input: embedder.pooled_input(&r.image, image.as_ref(), &r.bbox)?,
        })
    })
    .into_iter()
    .collect()
}

/// Ground-truth boxes of a stamped dataset as proposals with objectness 1.
pub fn ground_truth_proposals(records: &[StampRecord]) -> Vec<Proposal> {
    records
        .iter()
        .map(|r| Proposal {
            image_id: r.image.clone(),
            bbox: r.bbox,
            objectness: 1.0,
        })
        .collect()
}
