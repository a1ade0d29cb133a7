//! Prototype-retrieval detection of stylized objects.
//!
//! The crate implements the second, retrieval-based layer of a two-layer
//! detector. Region proposals come from an external detector; each crop is
//! turned into a unit-length descriptor, embedded with a small trained affine
//! head and matched against a table of class prototypes. The same crate holds
//! the pieces needed to build and judge such a system at desk scale: a
//! synthetic "stamping" data generator, triplet-loss training with Adam, and
//! detection/retrieval metrics.
//!
//! Data-parallel inner loops (index scans, batched gradients, sample
//! generation, per-image inference) go through [`par::Exec`]. With the
//! `parallel` feature (on by default) they run on rayon; without it, every
//! path falls back to the sequential implementation. Results are identical
//! either way.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod descriptor;
pub mod error;
pub mod eval;
pub mod format;
pub mod index;
pub mod par;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use descriptor::{AffineHead, Descriptor, FeatureMap, Pooling, WhitenTransform};
pub use error::{Error, Result};
pub use eval::{BBox, Detection, GroundTruth};
pub use index::{Prototype, PrototypeIndex, QueryResult, SharedIndex};
pub use par::Exec;
