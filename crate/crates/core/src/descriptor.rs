//! Feature maps, descriptors and the transforms between them.
//!
//! A [`FeatureMap`] stands in for the last convolutional layer of a backbone.
//! Pooling collapses it to a [`Descriptor`]; [`featurize`] then runs the
//! embedding chain `l2 -> affine -> l2` that the triplet head is trained
//! through. All math here is `f64`; on-disk formats store `f32`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Default whitening regularizer.
pub const DEFAULT_WHITEN_EPS: f64 = 1e-10;

/// Default descriptor length.
pub const DEFAULT_DIM: usize = 512;

/// Dense `height x width x channels` tensor, row-major in `(y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Invalid(format!(
                "feature map dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("feature map contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The channel vector at cell `(x, y)`.
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub(crate) fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Max-pools the rectangle `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn max_pool_region(&self, x0: usize, y0: usize, w: usize, h: usize) -> Descriptor {
        let mut out = vec![f64::NEG_INFINITY; self.channels];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for (o, &v) in out.iter_mut().zip(self.cell(x, y)) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
        Descriptor(out)
    }
}

/// A fixed-length real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn dot(&self, other: &Descriptor) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(values: &[f32]) -> Self {
        Self(values.iter().map(|&v| v as f64).collect())
    }
}

impl From<Vec<f64>> for Descriptor {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Avg,
    Rmac,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" => Ok(Pooling::Avg),
            "rmac" => Ok(Pooling::Rmac),
            other => Err(Error::Invalid(format!("unknown pooling mode {other:?}"))),
        }
    }
}

/// Number of R-MAC scales used when featurizing with [`Pooling::Rmac`].
pub const DEFAULT_RMAC_LEVELS: usize = 3;

pub fn max_pool_global(fm: &FeatureMap) -> Descriptor {
    fm.max_pool_region(0, 0, fm.width, fm.height)
}

pub fn avg_pool_global(fm: &FeatureMap) -> Descriptor {
    let mut out = vec![0.0; fm.channels];
    for cell in fm.data.chunks_exact(fm.channels) {
        for (o, v) in out.iter_mut().zip(cell) {
            *o += v;
        }
    }
    let n = (fm.width * fm.height) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Descriptor(out)
}

/// Square region `(x0, y0, side)` of an R-MAC grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

/// Regions of the usual R-MAC layout for `levels` scales.
///
/// At scale `l` the square side is `floor(2 * min(W, H) / (l + 1))`; the long
/// axis gets extra regions so that neighbouring regions overlap by roughly
/// 40%.
pub fn rmac_regions(width: usize, height: usize, levels: usize) -> Vec<Region> {
    const OVERLAP: f64 = 0.4;
    let (w, h) = (width as f64, height as f64);
    let short = w.min(h);
    let long = w.max(h);

    // Extra steps along the long side: pick the count whose overlap is
    // closest to the target.
    let mut best = 0usize;
    let mut best_err = f64::INFINITY;
    for (i, steps) in (2..=7).enumerate() {
        let b = (long - short) / (steps as f64 - 1.0);
        let err = ((short * short - short * b) / (short * short) - OVERLAP).abs();
        if err < best_err {
            best_err = err;
            best = i;
        }
    }
    let (extra_w, extra_h) = match width.cmp(&height) {
        std::cmp::Ordering::Greater => (best + 1, 0),
        std::cmp::Ordering::Less => (0, best + 1),
        std::cmp::Ordering::Equal => (0, 0),
    };

    let mut regions = Vec::new();
    for l in 1..=levels {
        let side = (2.0 * short / (l as f64 + 1.0)).floor();
        if side < 1.0 {
            break;
        }
        let starts = |extent: f64, extra: usize| -> Vec<usize> {
            let n = l + extra;
            let step = if n == 1 {
                0.0
            } else {
                (extent - side) / (n as f64 - 1.0)
            };
            let mut v: Vec<usize> = (0..n)
                .map(|i| (i as f64 * step).floor().max(0.0) as usize)
                .collect();
            v.dedup();
            v
        };
        let side_u = side as usize;
        for &y in &starts(h, extra_h) {
            for &x in &starts(w, extra_w) {
                regions.push(Region { x, y, side: side_u });
            }
        }
    }
    regions
}

/// Regional maximum activations: sum of l2-normalized regional max-pools,
/// normalized again.
pub fn rmac_pool(fm: &FeatureMap, levels: usize) -> Result<Descriptor> {
    if levels == 0 {
        return Err(Error::Invalid("R-MAC needs at least one level".into()));
    }
    let mut sum = vec![0.0; fm.channels];
    for r in rmac_regions(fm.width, fm.height, levels) {
        let pooled = fm.max_pool_region(r.x, r.y, r.side, r.side);
        // Zero regions contribute nothing.
        if let Ok(unit) = l2_normalize(&pooled) {
            for (s, v) in sum.iter_mut().zip(unit.values()) {
                *s += v;
            }
        }
    }
    l2_normalize(&Descriptor(sum))
}

pub fn pool(fm: &FeatureMap, pooling: Pooling) -> Result<Descriptor> {
    match pooling {
        Pooling::Max => Ok(max_pool_global(fm)),
        Pooling::Avg => Ok(avg_pool_global(fm)),
        Pooling::Rmac => rmac_pool(fm, DEFAULT_RMAC_LEVELS),
    }
}

pub fn l2_normalize(v: &Descriptor) -> Result<Descriptor> {
    let n = v.norm();
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    Ok(Descriptor(v.0.iter().map(|x| x / n).collect()))
}

/// Fully-connected layer `W v + b`, `W` stored row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineHead {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl AffineHead {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Invalid("head dimensions must be positive".into()));
        }
        check_dim(in_dim * out_dim, weights.len())?;
        check_dim(out_dim, bias.len())?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("head contains non-finite values".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            weights,
            bias: vec![0.0; dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.in_dim..(i + 1) * self.in_dim]
    }

    /// Number of trainable parameters (`W` then `b`).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Parameters flattened as `W` (row-major) followed by `b`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let (w, b) = params.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
        Ok(())
    }

    pub(crate) fn forward(&self, v: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|i| dot(self.row(i), v) + self.bias[i])
            .collect()
    }
}

pub fn apply_affine(head: &AffineHead, v: &Descriptor) -> Result<Descriptor> {
    check_dim(head.in_dim, v.dim())?;
    Ok(Descriptor(head.forward(&v.0)))
}

/// `l2(affine(l2(v)))` on an already pooled vector.
pub fn embed_pooled(head: &AffineHead, pooled: &Descriptor) -> Result<Descriptor> {
    let unit = l2_normalize(pooled)?;
    l2_normalize(&apply_affine(head, &unit)?)
}

/// Pool, normalize, project and normalize again.
pub fn featurize(fm: &FeatureMap, head: &AffineHead, pooling: Pooling) -> Result<Descriptor> {
    let pooled = pool(fm, pooling)?;
    check_dim(head.in_dim, pooled.dim())?;
    embed_pooled(head, &pooled)
}

/// PCA whitening: `projection * (v - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenTransform {
    mean: Vec<f64>,
    /// `out_dim x in_dim`, row-major.
    projection: Vec<f64>,
    out_dim: usize,
    eps: f64,
}

impl WhitenTransform {
    pub fn new(mean: Vec<f64>, projection: Vec<f64>, out_dim: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Invalid("whitening eps must be positive".into()));
        }
        if mean.is_empty() || out_dim == 0 {
            return Err(Error::Invalid("whitening dimensions must be positive".into()));
        }
        check_dim(mean.len() * out_dim, projection.len())?;
        Ok(Self {
            mean,
            projection,
            out_dim,
            eps,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Whitens and re-normalizes.
    pub fn apply_normalized(&self, v: &Descriptor) -> Result<Descriptor> {
        l2_normalize(&apply_whitening(self, v)?)
    }
}

/// Fits PCA whitening on `samples`.
///
/// Eigenvalues are sorted descending; directions whose eigenvalue does not
/// exceed `eps` (or is numerically zero relative to the largest) are dropped,
/// so `out_dim` can be smaller than the input dimension for rank-deficient
/// sample sets.
pub fn fit_whitening(samples: &[Descriptor], eps: f64) -> Result<WhitenTransform> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(samples.len()));
    }
    if !(eps > 0.0) {
        return Err(Error::Invalid("whitening eps must be positive".into()));
    }
    let d = samples[0].dim();
    for s in samples {
        check_dim(d, s.dim())?;
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for s in samples {
        for ((c, v), m) in centered.iter_mut().zip(s.values()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    let floor = eps.max(largest * 1e-12);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > floor)
        .collect();
    if kept.is_empty() {
        return Err(Error::DegenerateCovariance);
    }

    let mut projection = Vec::with_capacity(kept.len() * d);
    for &i in &kept {
        let scale = 1.0 / (eig.eigenvalues[i] + eps).sqrt();
        let col = eig.eigenvectors.column(i);
        // Fix the sign so the largest-magnitude component is positive.
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        projection.extend(col.iter().map(|v| sign * v * scale));
    }
    WhitenTransform::new(mean, projection, kept.len(), eps)
}

pub fn apply_whitening(t: &WhitenTransform, v: &Descriptor) -> Result<Descriptor> {
    check_dim(t.in_dim(), v.dim())?;
    let centered: Vec<f64> = v.values().iter().zip(&t.mean).map(|(x, m)| x - m).collect();
    let d = t.in_dim();
    Ok(Descriptor(
        (0..t.out_dim)
            .map(|i| dot(&t.projection[i * d..(i + 1) * d], &centered))
            .collect(),
    ))
}
