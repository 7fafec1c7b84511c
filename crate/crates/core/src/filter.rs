//! Particle filter over 2-D positions.
//!
//! Particles carry `(x, y)` and a weight; heading is a shared per-step input
//! rather than filter state. One step is
//! propagate -> score -> [`ParticleSet::reweight`] -> [`ParticleSet::maybe_resample`]
//! -> [`ParticleSet::estimate`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::Point;
use crate::rng::CounterNormals;

/// Similarity score for one particle; `None` means no observation is
/// available (out of grid, masked tile) and maps to the likelihood floor.
pub type Score = Option<f64>;

const NORMALIZED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FilterError {
    #[error("invalid filter argument: {0}")]
    InvalidArgument(String),
    #[error("expected {expected} scores, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("particle weights are not normalized (sum = {0})")]
    Unnormalized(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

impl Particle {
    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryStep {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
}

/// Gaussian likelihood of a similarity score around the score expected for a
/// true match, floored so that a batch of hopeless particles stays
/// normalizable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementModel {
    pub mu: f64,
    pub sigma: f64,
    pub floor: f64,
}

impl Default for MeasurementModel {
    fn default() -> Self {
        Self { mu: 1.0, sigma: 0.3, floor: 1e-12 }
    }
}

impl MeasurementModel {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !self.mu.is_finite() {
            return Err(FilterError::InvalidArgument(format!("mu must be finite, got {}", self.mu)));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(FilterError::InvalidArgument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.floor.is_finite() && self.floor > 0.0) {
            return Err(FilterError::InvalidArgument(format!("floor must be > 0, got {}", self.floor)));
        }
        Ok(())
    }

    pub fn likelihood(&self, score: Score) -> f64 {
        match score {
            Some(s) if s.is_finite() => {
                let z = (s - self.mu) / self.sigma;
                (-0.5 * z * z).exp().max(self.floor)
            }
            _ => self.floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleStrategy {
    /// Systematic resampling when ESS falls below the threshold.
    Systematic,
    /// Multinomial resampling when ESS falls below the threshold.
    Multinomial,
    /// Multinomial resampling after every update, ignoring ESS.
    EveryStepMultinomial,
}

impl ResampleStrategy {
    pub const ALL: [ResampleStrategy; 3] =
        [Self::Systematic, Self::Multinomial, Self::EveryStepMultinomial];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Systematic => "systematic",
            Self::Multinomial => "multinomial",
            Self::EveryStepMultinomial => "every-step-multinomial",
        }
    }
}

impl std::str::FromStr for ResampleStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "systematic" => Ok(Self::Systematic),
            "multinomial" => Ok(Self::Multinomial),
            "every-step-multinomial" | "every-step" => Ok(Self::EveryStepMultinomial),
            other => Err(format!("unknown resampling strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: Point,
    pub std_x: f64,
    pub std_y: f64,
    /// `sqrt(sum_i w_i * |p_i - mean|^2)`
    pub rms_dispersion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    normalized: bool,
}

impl ParticleSet {
    /// Builds a set from explicit particles and normalizes their weights.
    pub fn from_particles(particles: Vec<Particle>) -> Result<Self, FilterError> {
        if particles.is_empty() {
            return Err(FilterError::InvalidArgument("particle set must not be empty".into()));
        }
        for p in &particles {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(FilterError::InvalidArgument(format!(
                    "particle position ({}, {}) is not finite",
                    p.x, p.y
                )));
            }
            if !(p.weight.is_finite() && p.weight >= 0.0) {
                return Err(FilterError::InvalidArgument(format!(
                    "particle weight {} is negative or not finite",
                    p.weight
                )));
            }
        }
        let mut set = Self { particles, normalized: false };
        set.normalize()?;
        Ok(set)
    }

    /// `n` particles drawn i.i.d. from `N(center, sigma^2 I)` with uniform weights.
    pub fn init_gaussian<R: Rng + ?Sized>(
        center: Point,
        sigma: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<Self, FilterError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(FilterError::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
        }
        if n == 0 {
            return Err(FilterError::InvalidArgument("particle count must be at least 1".into()));
        }
        if !center.is_finite() {
            return Err(FilterError::InvalidArgument(format!("center {center} is not finite")));
        }
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        let w = 1.0 / n as f64;
        let particles = (0..n)
            .map(|_| Particle {
                x: center.x + normal.sample(rng),
                y: center.y + normal.sample(rng),
                weight: w,
            })
            .collect();
        Ok(Self { particles, normalized: true })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.particles.iter().map(|p| p.weight)
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights().sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    fn require_normalized(&self) -> Result<(), FilterError> {
        let sum = self.weight_sum();
        if !self.normalized || (sum - 1.0).abs() > NORMALIZED_TOL {
            return Err(FilterError::Unnormalized(sum));
        }
        Ok(())
    }

    /// Rescales weights to sum to one. A set whose weights are all zero
    /// becomes uniform.
    pub fn normalize(&mut self) -> Result<(), FilterError> {
        let sum = self.weight_sum();
        if !sum.is_finite() {
            return Err(FilterError::InvalidArgument(format!("weight sum {sum} is not finite")));
        }
        if sum > 0.0 {
            let inv = 1.0 / sum;
            for p in &mut self.particles {
                p.weight *= inv;
            }
        } else {
            let w = 1.0 / self.len() as f64;
            for p in &mut self.particles {
                p.weight = w;
            }
        }
        self.normalized = true;
        Ok(())
    }

    /// Moves every particle by the odometry displacement plus per-axis
    /// Gaussian noise with std `noise_frac * |(dx, dy)|`. Weights are unchanged.
    pub fn propagate(
        &mut self,
        odo: &OdometryStep,
        noise_frac: f64,
        noise: &CounterNormals,
    ) -> Result<(), FilterError> {
        if !(noise_frac.is_finite() && noise_frac >= 0.0) {
            return Err(FilterError::InvalidArgument(format!(
                "noise fraction must be >= 0, got {noise_frac}"
            )));
        }
        if !(odo.dx.is_finite() && odo.dy.is_finite()) {
            return Err(FilterError::InvalidArgument("odometry is not finite".into()));
        }
        let std = noise_frac * odo.dx.hypot(odo.dy);
        if std == 0.0 {
            for p in &mut self.particles {
                p.x += odo.dx;
                p.y += odo.dy;
            }
            return Ok(());
        }
        self.particles.par_iter_mut().enumerate().for_each(|(i, p)| {
            let (nx, ny) = noise.pair(i);
            p.x += odo.dx + std * nx;
            p.y += odo.dy + std * ny;
        });
        Ok(())
    }

    /// Multiplies each weight by its measurement likelihood and renormalizes.
    pub fn reweight(&mut self, scores: &[Score], model: &MeasurementModel) -> Result<(), FilterError> {
        if scores.len() != self.len() {
            return Err(FilterError::LengthMismatch { expected: self.len(), actual: scores.len() });
        }
        model.validate()?;
        for (p, &s) in self.particles.iter_mut().zip(scores) {
            p.weight *= model.likelihood(s);
        }
        self.normalize()
    }

    /// Effective sample size, `1 / sum(w_i^2)`.
    pub fn ess(&self) -> Result<f64, FilterError> {
        self.require_normalized()?;
        let sum_sq: f64 = self.weights().map(|w| w * w).sum();
        Ok(1.0 / sum_sq)
    }

    fn replace_with(&mut self, indices: &[usize]) {
        let w = 1.0 / self.len() as f64;
        let next = indices
            .iter()
            .map(|&i| Particle { weight: w, ..self.particles[i] })
            .collect();
        self.particles = next;
        self.normalized = true;
    }

    fn weight_vec(&self) -> Vec<f64> {
        self.weights().collect()
    }

    pub fn resample_multinomial<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), FilterError> {
        self.require_normalized()?;
        let indices = multinomial_indices(&self.weight_vec(), rng);
        self.replace_with(&indices);
        Ok(())
    }

    pub fn resample_systematic<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), FilterError> {
        let u = rng.random::<f64>();
        self.resample_systematic_with_offset(u / self.len() as f64)
    }

    /// Systematic resampling with an explicit first position `u0 in [0, 1/N)`.
    pub fn resample_systematic_with_offset(&mut self, u0: f64) -> Result<(), FilterError> {
        self.require_normalized()?;
        let n = self.len() as f64;
        if !(0.0..1.0 / n).contains(&u0) {
            return Err(FilterError::InvalidArgument(format!("offset {u0} outside [0, 1/N)")));
        }
        let indices = systematic_indices(&self.weight_vec(), u0 * n);
        self.replace_with(&indices);
        Ok(())
    }

    /// Resamples according to `strategy`; returns whether resampling happened.
    pub fn maybe_resample<R: Rng + ?Sized>(
        &mut self,
        threshold_frac: f64,
        strategy: ResampleStrategy,
        rng: &mut R,
    ) -> Result<bool, FilterError> {
        if !(threshold_frac > 0.0 && threshold_frac <= 1.0) {
            return Err(FilterError::InvalidArgument(format!(
                "ESS threshold must be in (0, 1], got {threshold_frac}"
            )));
        }
        let resample = match strategy {
            ResampleStrategy::EveryStepMultinomial => true,
            _ => self.ess()? < threshold_frac * self.len() as f64,
        };
        if resample {
            match strategy {
                ResampleStrategy::Systematic => self.resample_systematic(rng)?,
                ResampleStrategy::Multinomial | ResampleStrategy::EveryStepMultinomial => {
                    self.resample_multinomial(rng)?
                }
            }
        }
        Ok(resample)
    }

    pub fn estimate(&self) -> Result<Estimate, FilterError> {
        self.require_normalized()?;
        // accumulate offsets from the first particle so a collapsed set
        // reports its point exactly
        let (ox, oy) = (self.particles[0].x, self.particles[0].y);
        let (mut mx, mut my) = (0.0, 0.0);
        for p in &self.particles {
            mx += p.weight * (p.x - ox);
            my += p.weight * (p.y - oy);
        }
        let (mx, my) = (ox + mx, oy + my);
        let (mut vx, mut vy) = (0.0, 0.0);
        for p in &self.particles {
            vx += p.weight * (p.x - mx) * (p.x - mx);
            vy += p.weight * (p.y - my) * (p.y - my);
        }
        Ok(Estimate {
            mean: Point::new(mx, my),
            std_x: vx.sqrt(),
            std_y: vy.sqrt(),
            rms_dispersion: (vx + vy).sqrt(),
        })
    }
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

/// Index of the last particle with positive weight; rounding in the
/// cumulative sum must never hand offspring to a zero-weight tail.
fn last_positive(weights: &[f64]) -> usize {
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Systematic selection on the scaled axis: positions `start + k` for
/// `k = 0..N` against the inclusive cumulative sum scaled by `N / total`.
/// `start` must lie in `[0, 1)`. A position within rounding distance of a
/// boundary counts as past it, so uniform weights with `start = 0` select
/// every particle exactly once.
pub fn systematic_indices(weights: &[f64], start: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let scale = n as f64 / total;
    let tol = 64.0 * f64::EPSILON * n as f64;
    let cum = cumulative(weights);
    let last = last_positive(weights);
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    for k in 0..n {
        let pos = start + k as f64;
        while i < last && pos + tol >= cum[i] * scale {
            i += 1;
        }
        out.push(i);
    }
    out
}

/// `N` independent categorical draws by weight.
pub fn multinomial_indices<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let cum = cumulative(weights);
    let total = cum[n - 1];
    let last = last_positive(weights);
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            cum.partition_point(|&c| c <= u).min(last)
        })
        .collect()
}

/// Offspring count per parent for a list of selected indices.
pub fn offspring_counts(indices: &[usize], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for &i in indices {
        counts[i] += 1;
    }
    counts
}
