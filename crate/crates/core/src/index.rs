//! Exact prototype index: class/variant-labelled unit descriptors searched
//! by cosine similarity.
//!
//! Descriptors are stored as one contiguous row-major `f32` matrix with a
//! parallel metadata table, so a query is a single matrix-vector product
//! followed by a top-k selection. Adding or removing prototypes only edits
//! the table; nothing upstream needs retraining.
//!
//! # File layout (`.pidx`, little-endian)
//!
//! ```text
//! "PIDX" | version u16 = 1 | dim u32 | count u64
//! | f32[count * dim]                       descriptor matrix, row-major
//! | count x (class str, variant str, metadata-json str)   str = u32 len + UTF-8
//! | crc32 u32                              over every preceding byte
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};

use crate::descriptor::{check_dim, Descriptor};
use crate::error::{Error, Result};
use crate::format::{read_file, write_file, Reader, Writer};
use crate::par::{self, Exec};

/// Allowed deviation of a stored descriptor's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: String,
    pub variant_id: String,
    pub descriptor: Descriptor,
    pub metadata: BTreeMap<String, String>,
}

impl Prototype {
    pub fn new(class_id: impl Into<String>, variant_id: impl Into<String>, descriptor: Descriptor) -> Self {
        Self {
            class_id: class_id.into(),
            variant_id: variant_id.into(),
            descriptor,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    #[serde(rename = "class")]
    pub class_id: String,
    #[serde(rename = "variant")]
    pub variant_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    class_id: String,
    variant_id: String,
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeIndex {
    /// 0 until the first insert.
    dim: usize,
    vectors: Vec<f32>,
    entries: Vec<Entry>,
    slots: HashMap<(String, String), usize>,
}

/// Dot product with eight independent accumulators; the fixed lane layout
/// keeps the result independent of how rows are scheduled.
#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Rows scored per parallel task.
const SCAN_CHUNK: usize = 256;

/// Queries sharing one pass over the rows in [`PrototypeIndex::query_batch`].
const BATCH_GROUP: usize = 32;

impl PrototypeIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// An empty index whose dimension is already fixed.
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Distinct class ids, sorted.
    pub fn classes(&self) -> Vec<&str> {
        let mut c: Vec<&str> = self.entries.iter().map(|e| e.class_id.as_str()).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, class_id: &str, variant_id: &str) -> Option<Prototype> {
        let &i = self.slots.get(&(class_id.to_string(), variant_id.to_string()))?;
        let e = &self.entries[i];
        Some(Prototype {
            class_id: e.class_id.clone(),
            variant_id: e.variant_id.clone(),
            descriptor: Descriptor::from_f32(self.row(i)),
            metadata: e.metadata.clone(),
        })
    }

    /// Prototypes in storage order.
    pub fn iter(&self) -> impl Iterator<Item = Prototype> + '_ {
        (0..self.len()).map(|i| {
            let e = &self.entries[i];
            Prototype {
                class_id: e.class_id.clone(),
                variant_id: e.variant_id.clone(),
                descriptor: Descriptor::from_f32(self.row(i)),
                metadata: e.metadata.clone(),
            }
        })
    }

    /// Inserts a prototype, replacing any with the same `(class, variant)`.
    pub fn add(&mut self, p: Prototype) -> Result<()> {
        let d = p.descriptor.dim();
        if d == 0 {
            return Err(Error::DimensionMismatch {
                expected: self.dim.max(1),
                got: 0,
            });
        }
        if self.dim != 0 {
            check_dim(self.dim, d)?;
        }
        let norm = p.descriptor.norm();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::NotNormalized { norm });
        }
        self.dim = d;
        let key = (p.class_id.clone(), p.variant_id.clone());
        let values = p.descriptor.to_f32();
        match self.slots.get(&key) {
            Some(&i) => {
                self.vectors[i * d..(i + 1) * d].copy_from_slice(&values);
                self.entries[i].metadata = p.metadata;
            }
            None => {
                self.slots.insert(key, self.entries.len());
                self.vectors.extend_from_slice(&values);
                self.entries.push(Entry {
                    class_id: p.class_id,
                    variant_id: p.variant_id,
                    metadata: p.metadata,
                });
            }
        }
        Ok(())
    }

    /// Removes one variant, or every variant of the class when `variant_id`
    /// is `None`. Returns the number removed.
    pub fn remove(&mut self, class_id: &str, variant_id: Option<&str>) -> usize {
        let hit = |e: &Entry| e.class_id == class_id && variant_id.is_none_or(|v| e.variant_id == v);
        if !self.entries.iter().any(hit) {
            return 0;
        }
        let d = self.dim;
        let mut vectors = Vec::with_capacity(self.vectors.len());
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut removed = 0;
        for (i, e) in std::mem::take(&mut self.entries).into_iter().enumerate() {
            if hit(&e) {
                removed += 1;
            } else {
                vectors.extend_from_slice(&self.vectors[i * d..(i + 1) * d]);
                entries.push(e);
            }
        }
        self.vectors = vectors;
        self.entries = entries;
        self.slots = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.class_id.clone(), e.variant_id.clone()), i))
            .collect();
        removed
    }

    /// Cosine similarity of `query` against every stored row, clamped to
    /// `[-1, 1]`.
    pub fn similarities(&self, query: &Descriptor, exec: Exec) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        check_dim(self.dim, query.dim())?;
        let q = query.to_f32();
        let mut out = vec![0.0f64; self.len()];
        par::fill_chunks(exec, &mut out, SCAN_CHUNK, |c, slot| {
            let base = c * SCAN_CHUNK;
            for (j, s) in slot.iter_mut().enumerate() {
                *s = f64::from(dot_f32(self.row(base + j), &q)).clamp(-1.0, 1.0);
            }
        });
        Ok(out)
    }

    fn rank(&self, a: (usize, f64), b: (usize, f64)) -> Ordering {
        b.1.total_cmp(&a.1)
            .then_with(|| self.entries[a.0].class_id.cmp(&self.entries[b.0].class_id))
            .then_with(|| self.entries[a.0].variant_id.cmp(&self.entries[b.0].variant_id))
    }

    fn top_k(&self, sims: Vec<f64>, k: usize, threshold: f64) -> Vec<QueryResult> {
        let mut hits: Vec<(usize, f64)> = sims
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s >= threshold)
            .collect();
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, |&a, &b| self.rank(a, b));
            hits.truncate(k);
        }
        hits.sort_unstable_by(|&a, &b| self.rank(a, b));
        hits.into_iter()
            .map(|(i, s)| QueryResult {
                class_id: self.entries[i].class_id.clone(),
                variant_id: self.entries[i].variant_id.clone(),
                similarity: s,
            })
            .collect()
    }

    /// Exact top-`k` prototypes with similarity ≥ `threshold`, sorted by
    /// similarity descending, then `(class, variant)` ascending.
    pub fn query(&self, query: &Descriptor, k: usize, threshold: f64) -> Result<Vec<QueryResult>> {
        self.query_with(query, k, threshold, Exec::Sequential)
    }

    pub fn query_with(&self, query: &Descriptor, k: usize, threshold: f64, exec: Exec) -> Result<Vec<QueryResult>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let sims = self.similarities(query, exec)?;
        Ok(self.top_k(sims, k, threshold))
    }

    /// Answers many queries; each result equals [`Self::query`] on that
    /// query. Queries are scanned in groups so every block of rows is read
    /// once per group; the parallel mode spreads groups over threads.
    pub fn query_batch(
        &self,
        queries: &[Descriptor],
        k: usize,
        threshold: f64,
        exec: Exec,
    ) -> Result<Vec<Vec<QueryResult>>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Ok(vec![Vec::new(); queries.len()]);
        }
        for q in queries {
            check_dim(self.dim, q.dim())?;
        }
        let groups: Vec<&[Descriptor]> = queries.chunks(BATCH_GROUP).collect();
        Ok(par::map(exec, &groups, |g| self.scan_group(g))
            .into_iter()
            .flatten()
            .map(|sims| self.top_k(sims, k, threshold))
            .collect())
    }

    fn scan_group(&self, group: &[Descriptor]) -> Vec<Vec<f64>> {
        let qs: Vec<Vec<f32>> = group.iter().map(Descriptor::to_f32).collect();
        let mut sims = vec![vec![0.0f64; self.len()]; group.len()];
        for start in (0..self.len()).step_by(SCAN_CHUNK) {
            let end = (start + SCAN_CHUNK).min(self.len());
            for (q, out) in qs.iter().zip(sims.iter_mut()) {
                for i in start..end {
                    out[i] = f64::from(dot_f32(self.row(i), q)).clamp(-1.0, 1.0);
                }
            }
        }
        sims
    }

    /// Best class and its similarity, or `None` when nothing passes
    /// `threshold`.
    pub fn query_topclass(&self, query: &Descriptor, threshold: f64) -> Result<Option<(String, f64)>> {
        Ok(self
            .query(query, 1, threshold)?
            .into_iter()
            .next()
            .map(|r| (r.class_id, r.similarity)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(b"PIDX");
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        w.f32s(self.vectors.iter().copied());
        for e in &self.entries {
            w.str(&e.class_id);
            w.str(&e.variant_id);
            w.str(&serde_json::to_string(&e.metadata).expect("string map serializes"));
        }
        let crc = crc32fast::hash(w.bytes());
        w.u32(crc);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // Magic and version before the checksum.
        Reader::new(bytes, b"PIDX")?;
        if bytes.len() < 4 + 2 + 4 + 8 + 4 {
            return Err(Error::Format("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::CorruptPayload { stored, computed });
        }
        let mut r = Reader::new(body, b"PIDX")?;
        let dim = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| Error::Format("count overflow".into()))?;
        let vectors = r.f32s(
            count
                .checked_mul(dim)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        let mut slots = HashMap::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let class_id = r.str()?;
            let variant_id = r.str()?;
            let metadata: BTreeMap<String, String> = serde_json::from_str(&r.str()?)
                .map_err(|e| Error::Format(format!("metadata: {e}")))?;
            if slots.insert((class_id.clone(), variant_id.clone()), i).is_some() {
                return Err(Error::Format(format!("duplicate prototype {class_id}/{variant_id}")));
            }
            entries.push(Entry {
                class_id,
                variant_id,
                metadata,
            });
        }
        r.expect_end()?;
        Ok(Self {
            dim,
            vectors,
            entries,
            slots,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Reader-writer handle: any number of concurrent queries, or one mutation.
/// A query never observes a half-applied add or remove.
#[derive(Debug, Clone, Default)]
pub struct SharedIndex {
    inner: Arc<RwLock<PrototypeIndex>>,
}

impl SharedIndex {
    pub fn new(index: PrototypeIndex) -> Self {
        Self {
            inner: Arc::new(RwLock::new(index)),
        }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, PrototypeIndex> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, PrototypeIndex> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    /// An immutable copy for slow work such as snapshots.
    pub fn snapshot(&self) -> PrototypeIndex {
        self.read().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit(rng: &mut impl Rng, d: usize) -> Descriptor {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        crate::descriptor::l2_normalize(&Descriptor::new(v)).unwrap()
    }

    fn d(v: &[f64]) -> Descriptor {
        Descriptor::new(v.to_vec())
    }

    #[test]
    fn add_then_query_hits_itself() {
        let mut idx = PrototypeIndex::new();
        idx.add(Prototype::new("a", "v1", d(&[0.6, 0.8]))).unwrap();
        let r = idx.query(&d(&[0.6, 0.8]), 5, 0.0).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].class_id.as_str(), r[0].variant_id.as_str()), ("a", "v1"));
        assert!((r[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn re_add_replaces() {
        let mut idx = PrototypeIndex::new();
        idx.add(Prototype::new("a", "v", d(&[1.0, 0.0]))).unwrap();
        idx.add(Prototype::new("a", "v", d(&[0.0, 1.0]))).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.get("a", "v").unwrap().descriptor, d(&[0.0, 1.0]));
    }

    #[test]
    fn add_validates() {
        let mut idx = PrototypeIndex::new();
        assert!(matches!(
            idx.add(Prototype::new("a", "v", d(&[1.0, 1.0]))),
            Err(Error::NotNormalized { .. })
        ));
        idx.add(Prototype::new("a", "v", d(&[1.0, 0.0]))).unwrap();
        assert!(matches!(
            idx.add(Prototype::new("b", "v", d(&[1.0, 0.0, 0.0]))),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
        assert!(matches!(
            idx.query(&d(&[1.0]), 1, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn remove_semantics() {
        let mut idx = PrototypeIndex::new();
        assert_eq!(idx.remove("nope", None), 0);
        idx.add(Prototype::new("a", "1", d(&[1.0, 0.0]))).unwrap();
        idx.add(Prototype::new("a", "2", d(&[0.0, 1.0]))).unwrap();
        idx.add(Prototype::new("b", "1", d(&[0.6, 0.8]))).unwrap();
        assert_eq!(idx.remove("a", Some("9")), 0);
        assert_eq!(idx.remove("a", None), 2);
        let r = idx.query(&d(&[1.0, 0.0]), 10, -1.0).unwrap();
        assert!(r.iter().all(|x| x.class_id != "a"));
        assert_eq!(idx.get("b", "1").unwrap().descriptor, d(&[0.6f32 as f64, 0.8f32 as f64]));
    }

    #[test]
    fn threshold_and_empty_index() {
        let idx = PrototypeIndex::new();
        assert!(idx.query(&d(&[1.0]), 3, 0.0).unwrap().is_empty());
        assert_eq!(idx.query_topclass(&d(&[1.0]), 0.0).unwrap(), None);

        let mut idx = PrototypeIndex::new();
        idx.add(Prototype::new("a", "1", d(&[1.0, 0.0]))).unwrap();
        idx.add(Prototype::new("a", "copy", d(&[1.0, 0.0]))).unwrap();
        idx.add(Prototype::new("b", "1", d(&[0.8, 0.6]))).unwrap();
        let r = idx.query(&d(&[1.0, 0.0]), 10, 0.999999).unwrap();
        assert_eq!(r.len(), 2);
        // Exact tie broken by variant id.
        assert_eq!(r[0].variant_id, "1");
        assert_eq!(r[1].variant_id, "copy");
    }

    #[test]
    fn topclass_collapses_variants() {
        let mut idx = PrototypeIndex::new();
        let q = d(&[1.0, 0.0]);
        let at = |s: f64| d(&[s, (1.0 - s * s).sqrt()]);
        idx.add(Prototype::new("A", "x", at(0.9))).unwrap();
        idx.add(Prototype::new("A", "y", at(0.8))).unwrap();
        idx.add(Prototype::new("B", "z", at(0.85))).unwrap();
        let (class, score) = idx.query_topclass(&q, 0.0).unwrap().unwrap();
        assert_eq!(class, "A");
        assert!((score - 0.9).abs() < 1e-6);
        assert_eq!(idx.query_topclass(&q, 0.95).unwrap(), None);
    }

    /// Reference model: a plain list, full sort.
    #[derive(Default)]
    struct Model {
        rows: Vec<(String, String, Vec<f32>)>,
    }

    impl Model {
        fn add(&mut self, c: &str, v: &str, x: &[f32]) {
            if let Some(r) = self.rows.iter_mut().find(|r| r.0 == c && r.1 == v) {
                r.2 = x.to_vec();
            } else {
                self.rows.push((c.into(), v.into(), x.to_vec()));
            }
        }

        fn remove(&mut self, c: &str, v: Option<&str>) -> usize {
            let before = self.rows.len();
            self.rows.retain(|r| !(r.0 == c && v.is_none_or(|v| r.1 == v)));
            before - self.rows.len()
        }

        fn query(&self, q: &[f32], k: usize, t: f64) -> Vec<(String, String, f64)> {
            let mut all: Vec<(String, String, f64)> = self
                .rows
                .iter()
                .map(|r| {
                    let s: f64 = r.2.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum();
                    (r.0.clone(), r.1.clone(), s.clamp(-1.0, 1.0))
                })
                .filter(|r| r.2 >= t)
                .collect();
            all.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap()
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            all.truncate(k);
            all
        }
    }

    /// Unit vectors with entries in {-1/2, 0, 1/2}: every dot product is exact
    /// in any summation order, and collisions produce genuine ties.
    fn lattice(rng: &mut impl Rng) -> Vec<f32> {
        let mut v = [0.0f32; 8];
        let mut slots: Vec<usize> = (0..8).collect();
        for i in 0..4 {
            let j = rng.random_range(i..8);
            slots.swap(i, j);
            v[slots[i]] = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
        }
        v.to_vec()
    }

    #[test]
    fn matches_reference_model_under_random_edits() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let mut idx = PrototypeIndex::new();
            let mut model = Model::default();
            for _ in 0..150 {
                let class = format!("c{}", rng.random_range(0..6));
                let variant = format!("v{}", rng.random_range(0..3));
                match rng.random_range(0..10) {
                    0..=5 => {
                        let x = lattice(&mut rng);
                        let desc = Descriptor::from_f32(&x);
                        idx.add(Prototype::new(&class, &variant, desc)).unwrap();
                        model.add(&class, &variant, &x);
                    }
                    6 => assert_eq!(idx.remove(&class, Some(&variant)), model.remove(&class, Some(&variant))),
                    7 => assert_eq!(idx.remove(&class, None), model.remove(&class, None)),
                    _ => {
                        let q = lattice(&mut rng);
                        let k = rng.random_range(1..8);
                        let t = [-1.0, 0.0, 0.25][rng.random_range(0..3)];
                        let got: Vec<(String, String, f64)> = idx
                            .query(&Descriptor::from_f32(&q), k, t)
                            .unwrap()
                            .into_iter()
                            .map(|r| (r.class_id, r.variant_id, r.similarity))
                            .collect();
                        assert_eq!(got, model.query(&q, k, t));
                    }
                }
                assert_eq!(idx.len(), model.rows.len());
            }
        }
    }

    #[test]
    fn batch_query_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut idx = PrototypeIndex::new();
        for i in 0..700 {
            idx.add(Prototype::new(format!("c{}", i % 50), format!("{i}"), unit(&mut rng, 40))).unwrap();
        }
        let queries: Vec<Descriptor> = (0..70).map(|_| unit(&mut rng, 40)).collect();
        let a = idx.query_batch(&queries, 5, 0.0, Exec::Sequential).unwrap();
        let b = idx.query_batch(&queries, 5, 0.0, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let single: Vec<Vec<QueryResult>> = queries.iter().map(|q| idx.query(q, 5, 0.0).unwrap()).collect();
        assert_eq!(a, single);
        for q in &queries {
            assert_eq!(
                idx.similarities(q, Exec::Sequential).unwrap(),
                idx.similarities(q, Exec::Parallel).unwrap()
            );
        }
    }

    #[test]
    fn similarities_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut idx = PrototypeIndex::new();
        for i in 0..50 {
            idx.add(Prototype::new("c", format!("{i}"), unit(&mut rng, 64))).unwrap();
        }
        let stored = idx.get("c", "3").unwrap().descriptor;
        let sims = idx.similarities(&stored, Exec::Sequential).unwrap();
        assert!(sims.iter().all(|s| (-1.0..=1.0).contains(s)));
        assert!((sims[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn persistence_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pidx");
        let mut idx = PrototypeIndex::new();
        let mut p = Prototype::new("a", "1", d(&[1.0, 0.0]));
        p.metadata.insert("source".into(), "logo.png".into());
        idx.add(p).unwrap();
        idx.add(Prototype::new("b", "1", d(&[0.0, 1.0]))).unwrap();
        idx.add(Prototype::new("c", "2", d(&[0.6, -0.8]))).unwrap();
        idx.save(&path).unwrap();
        let back = PrototypeIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        let q = d(&[0.6, 0.8]);
        assert_eq!(back.query(&q, 3, -1.0).unwrap(), idx.query(&q, 3, -1.0).unwrap());
        assert_eq!(back.to_bytes(), idx.to_bytes());

        let bytes = idx.to_bytes();
        for cut in [3, 10, 20, bytes.len() - 1] {
            let err = PrototypeIndex::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_) | Error::CorruptPayload { .. }), "{err}");
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(
            PrototypeIndex::from_bytes(&flipped),
            Err(Error::CorruptPayload { .. })
        ));
        let mut bad_version = bytes.clone();
        bad_version[4] = 7;
        assert!(matches!(PrototypeIndex::from_bytes(&bad_version), Err(Error::Format(_))));
        assert!(matches!(
            PrototypeIndex::load(&dir.path().join("missing.pidx")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn empty_index_roundtrip() {
        let idx = PrototypeIndex::new();
        assert_eq!(PrototypeIndex::from_bytes(&idx.to_bytes()).unwrap(), idx);
    }

    #[test]
    fn shared_index_readers_see_whole_updates() {
        let shared = SharedIndex::new(PrototypeIndex::new());
        shared.write().add(Prototype::new("a", "1", d(&[1.0, 0.0]))).unwrap();
        let reader = shared.clone();
        let handle = std::thread::spawn(move || reader.read().len());
        assert_eq!(handle.join().unwrap(), 1);
        assert_eq!(shared.snapshot().len(), 1);
    }
}
