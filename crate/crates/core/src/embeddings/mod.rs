//! Satellite embedding store, pose-aware ground embeddings and similarity
//! scoring.
//!
//! A ground observation is encoded once per step into a [`BaseEmbedding`].
//! For every particle the in-tile pose `(dx, dy, psi)` is appended to that
//! base and passed through a [`ProjectionHead`]. Because the head is linear,
//! the base half of the projection is computed once per step
//! ([`ProjectionHead::prepare`]) and only the four pose columns are applied
//! per particle ([`ProjectionHead::append_pose`]).

mod store;
pub mod synthetic;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::filter::{Particle, Score};
use crate::grid::{GridError, Pose, PoseTriplet, TileGrid};
use crate::rng::{stream, Purpose};

pub use store::{decode_store, encode_store, load_store, write_store, EmbeddingStore, STORE_MAGIC};
pub use synthetic::{synth_observe, ObservationMode, SyntheticObservation, SyntheticWorld, TileRect, WorldSpec};

/// Width of the pose encoding appended to a base embedding.
pub const POSE_ENCODING_DIM: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("invalid embedding argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("malformed store header: {0}")]
    MalformedHeader(String),
    #[error("store declares a {declared_rows}x{declared_cols} grid but the search grid is {rows}x{cols}")]
    GridMismatch { declared_rows: usize, declared_cols: usize, rows: usize, cols: usize },
    #[error("store holds {actual} records, expected {expected}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("store payload has {0} trailing bytes that do not form a whole record")]
    TruncatedRecord(usize),
    #[error("record {record} component {component} is not finite")]
    NonFinite { record: usize, component: usize },
    #[error("record {0} has zero norm")]
    ZeroVector(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit L2 norm.
    pub fn new(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::InvalidArgument("embedding must not be empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::InvalidArgument("embedding has non-finite entries".into()));
        }
        let norm = l2(&values);
        if norm == 0.0 {
            return Err(EmbeddingError::InvalidArgument("cannot normalize a zero vector".into()));
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self { values })
    }

    /// Keeps `values` verbatim when already unit norm within `1e-6`,
    /// otherwise normalizes.
    pub(crate) fn from_near_unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let norm = l2(&values);
        if (norm - 1.0).abs() <= 1e-6 {
            Ok(Self { values })
        } else {
            Self::new(values)
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl std::ops::Neg for &EmbeddingVector {
    type Output = EmbeddingVector;

    fn neg(self) -> EmbeddingVector {
        EmbeddingVector { values: self.values.iter().map(|v| -v).collect() }
    }
}

/// Intermediate ground representation, before the pose is appended.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseEmbedding {
    values: Vec<f64>,
}

impl BaseEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::InvalidArgument("base embedding has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(dx / (s/2), dy / (s/2), sin psi, cos psi)` for tile spacing `s`.
pub fn pose_encoding(pose: &PoseTriplet, spacing: f64) -> [f64; POSE_ENCODING_DIM] {
    let half = 0.5 * spacing;
    [pose.dx / half, pose.dy / half, pose.psi.sin(), pose.psi.cos()]
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Base half of the projection, computed once per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBase {
    projected: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadCounters {
    pub prepares: usize,
    pub pose_appends: usize,
}

/// Fixed linear map from `[base ; pose encoding]` to the embedding space,
/// followed by unit normalization. Not learned.
#[derive(Debug)]
pub struct ProjectionHead {
    base_dim: usize,
    out_dim: usize,
    spacing: f64,
    // out_dim rows of (base_dim + POSE_ENCODING_DIM) columns
    weights: Vec<f64>,
    prepares: AtomicUsize,
    appends: AtomicUsize,
}

impl Clone for ProjectionHead {
    fn clone(&self) -> Self {
        Self {
            base_dim: self.base_dim,
            out_dim: self.out_dim,
            spacing: self.spacing,
            weights: self.weights.clone(),
            prepares: AtomicUsize::new(0),
            appends: AtomicUsize::new(0),
        }
    }
}

impl ProjectionHead {
    fn validate_dims(out_dim: usize, spacing: f64) -> Result<(), EmbeddingError> {
        if out_dim == 0 {
            return Err(EmbeddingError::InvalidArgument("output dimension must be positive".into()));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(EmbeddingError::InvalidArgument(format!("spacing must be > 0, got {spacing}")));
        }
        Ok(())
    }

    /// Seeded Gaussian weights with variance `1 / fan_in`.
    pub fn seeded(base_dim: usize, out_dim: usize, spacing: f64, seed: u64) -> Result<Self, EmbeddingError> {
        Self::validate_dims(out_dim, spacing)?;
        let fan_in = base_dim + POSE_ENCODING_DIM;
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        let mut rng = stream(seed, Purpose::Projection);
        let weights = (0..out_dim * fan_in).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self::from_weights(base_dim, out_dim, spacing, weights))
    }

    /// Identity map; the output dimension is `base_dim + 4`.
    pub fn identity(base_dim: usize, spacing: f64) -> Result<Self, EmbeddingError> {
        let n = base_dim + POSE_ENCODING_DIM;
        Self::validate_dims(n, spacing)?;
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Ok(Self::from_weights(base_dim, n, spacing, weights))
    }

    fn from_weights(base_dim: usize, out_dim: usize, spacing: f64, weights: Vec<f64>) -> Self {
        Self {
            base_dim,
            out_dim,
            spacing,
            weights,
            prepares: AtomicUsize::new(0),
            appends: AtomicUsize::new(0),
        }
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn counters(&self) -> HeadCounters {
        HeadCounters {
            prepares: self.prepares.load(Ordering::Relaxed),
            pose_appends: self.appends.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        self.prepares.store(0, Ordering::Relaxed);
        self.appends.store(0, Ordering::Relaxed);
    }

    fn row(&self, j: usize) -> &[f64] {
        let width = self.base_dim + POSE_ENCODING_DIM;
        &self.weights[j * width..(j + 1) * width]
    }

    pub fn prepare(&self, base: &BaseEmbedding) -> Result<PreparedBase, EmbeddingError> {
        if base.dim() != self.base_dim {
            return Err(EmbeddingError::DimensionMismatch { expected: self.base_dim, actual: base.dim() });
        }
        self.prepares.fetch_add(1, Ordering::Relaxed);
        let projected = (0..self.out_dim)
            .map(|j| self.row(j)[..self.base_dim].iter().zip(&base.values).map(|(w, b)| w * b).sum())
            .collect();
        Ok(PreparedBase { projected })
    }

    pub fn append_pose(&self, prepared: &PreparedBase, pose: &PoseTriplet) -> Result<EmbeddingVector, EmbeddingError> {
        self.appends.fetch_add(1, Ordering::Relaxed);
        let enc = pose_encoding(pose, self.spacing);
        let mut out = Vec::with_capacity(self.out_dim);
        for (j, &b) in prepared.projected.iter().enumerate() {
            let pose_cols = &self.row(j)[self.base_dim..];
            let mut acc = b;
            for (w, e) in pose_cols.iter().zip(&enc) {
                acc += w * e;
            }
            out.push(acc);
        }
        EmbeddingVector::new(out)
    }

    pub fn pose_aware_embedding(&self, base: &BaseEmbedding, pose: &PoseTriplet) -> Result<EmbeddingVector, EmbeddingError> {
        let prepared = self.prepare(base)?;
        self.append_pose(&prepared, pose)
    }
}

/// Produces the base embedding of the ground observation taken at `pose`.
pub trait BaseEncoder {
    fn base_dim(&self) -> usize;
    fn encode(&self, pose: &Pose) -> BaseEmbedding;
}

/// Deterministic stand-in for the ground backbone: random Fourier features
/// of the observation position, so nearby observations embed similarly.
#[derive(Debug)]
pub struct SyntheticEncoder {
    frequencies: Vec<(f64, f64)>,
    phases: Vec<f64>,
    calls: AtomicUsize,
}

impl SyntheticEncoder {
    pub fn new(base_dim: usize, length_scale: f64, seed: u64) -> Result<Self, EmbeddingError> {
        if !(length_scale.is_finite() && length_scale > 0.0) {
            return Err(EmbeddingError::InvalidArgument(format!("length scale must be > 0, got {length_scale}")));
        }
        let mut rng = stream(seed ^ 0x5eed_ba5e, Purpose::Projection);
        let normal = Normal::new(0.0, 1.0 / length_scale).expect("positive std");
        let frequencies = (0..base_dim).map(|_| (normal.sample(&mut rng), normal.sample(&mut rng))).collect();
        let phases = (0..base_dim)
            .map(|_| rand::Rng::random::<f64>(&mut rng) * 2.0 * std::f64::consts::PI)
            .collect();
        Ok(Self { frequencies, phases, calls: AtomicUsize::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl BaseEncoder for SyntheticEncoder {
    fn base_dim(&self) -> usize {
        self.phases.len()
    }

    fn encode(&self, pose: &Pose) -> BaseEmbedding {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let values = self
            .frequencies
            .iter()
            .zip(&self.phases)
            .map(|(&(fx, fy), &ph)| (fx * pose.x + fy * pose.y + ph).cos())
            .collect();
        BaseEmbedding { values }
    }
}

/// Per-particle similarity between the pose-aware ground embedding and the
/// particle's satellite tile embedding. Particles outside the grid get
/// `None`. The base embedding is prepared exactly once.
pub fn pseudo_similarity(
    particles: &[Particle],
    base: &BaseEmbedding,
    store: &EmbeddingStore,
    grid: &TileGrid,
    head: &ProjectionHead,
    heading: f64,
) -> Result<Vec<Score>, EmbeddingError> {
    store.check_grid(grid)?;
    if head.out_dim() != store.dim() {
        return Err(EmbeddingError::DimensionMismatch { expected: store.dim(), actual: head.out_dim() });
    }
    let prepared = head.prepare(base)?;
    particles
        .par_iter()
        .map(|p| {
            let pos = p.position();
            let Ok(tile) = grid.tile_of(pos) else {
                return Ok(None);
            };
            let pose = grid.displacement_in_tile(pos, heading)?;
            let emb = head.append_pose(&prepared, &pose)?;
            similarity(&emb, store.get(tile)).map(Some)
        })
        .collect()
}

/// Scores particles against a store using an encoder for the ground
/// observation; one encoder call per [`EmbeddingScorer::score`].
pub struct EmbeddingScorer<'a, E: BaseEncoder> {
    pub grid: &'a TileGrid,
    pub store: &'a EmbeddingStore,
    pub head: &'a ProjectionHead,
    pub encoder: &'a E,
}

impl<E: BaseEncoder + Sync> EmbeddingScorer<'_, E> {
    pub fn score(&self, particles: &[Particle], observed_at: &Pose, heading: f64) -> Result<Vec<Score>, EmbeddingError> {
        let base = self.encoder.encode(observed_at);
        pseudo_similarity(particles, &base, self.store, self.grid, self.head, heading)
    }
}
