//! Deterministic synthetic world standing in for the trained network.
//!
//! The score of a particle is a pose kernel around the true pose,
//!
//! ```text
//! exp(-|p - p_true|^2 / (2 rho^2)) * exp(-kappa (1 - cos(psi - psi_true))) + eps
//! ```
//!
//! plus the same kernel around every confuser pose, with `eps ~ N(0,
//! sigma_obs^2)` and the result clamped to `[-1, 1]`. Masked tiles (rivers,
//! lakes) score the configured floor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BaseEmbedding, BaseEncoder, EmbeddingError};
use crate::filter::{Particle, Score};
use crate::grid::{Point, Pose, TileGrid, TileIndex};

/// Which parts of the particle pose reach the similarity measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationMode {
    /// In-tile displacement and heading.
    #[default]
    PoseAware,
    /// Heading only; position is quantized to the tile center.
    HeadingOnly,
    /// Neither; one score per tile.
    OrientationBlind,
}

impl ObservationMode {
    pub const ALL: [ObservationMode; 3] = [Self::PoseAware, Self::HeadingOnly, Self::OrientationBlind];

    pub fn label(&self) -> &'static str {
        match self {
            Self::PoseAware => "pose-aware",
            Self::HeadingOnly => "heading-only",
            Self::OrientationBlind => "orientation-blind",
        }
    }
}

impl std::str::FromStr for ObservationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pose-aware" => Ok(Self::PoseAware),
            "heading-only" => Ok(Self::HeadingOnly),
            "orientation-blind" => Ok(Self::OrientationBlind),
            other => Err(format!("unknown observation mode `{other}`")),
        }
    }
}

/// Inclusive rectangle of tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRect {
    pub rows: [usize; 2],
    pub cols: [usize; 2],
}

impl TileRect {
    pub fn contains(&self, tile: TileIndex) -> bool {
        (self.rows[0]..=self.rows[1]).contains(&tile.row) && (self.cols[0]..=self.cols[1]).contains(&tile.col)
    }
}

/// Serializable description of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    /// Position kernel scale, meters.
    pub rho: f64,
    /// Heading sensitivity.
    pub kappa: f64,
    /// Observation noise std.
    pub sigma_obs: f64,
    /// Score reported for masked tiles; `None` reports no observation,
    /// which the filter maps to its likelihood floor.
    pub floor_score: Option<f64>,
    pub confusers: Vec<Pose>,
    pub mask: Vec<TileRect>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self { rho: 90.0, kappa: 4.0, sigma_obs: 0.1, floor_score: None, confusers: Vec::new(), mask: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    spec: WorldSpec,
    grid: TileGrid,
    masked: Vec<bool>,
}

impl SyntheticWorld {
    pub fn new(spec: WorldSpec, grid: TileGrid) -> Result<Self, EmbeddingError> {
        if !(spec.rho.is_finite() && spec.rho > 0.0) {
            return Err(EmbeddingError::InvalidArgument(format!("rho must be > 0, got {}", spec.rho)));
        }
        if !(spec.kappa.is_finite() && spec.kappa >= 0.0) {
            return Err(EmbeddingError::InvalidArgument(format!("kappa must be >= 0, got {}", spec.kappa)));
        }
        if !(spec.sigma_obs.is_finite() && spec.sigma_obs >= 0.0) {
            return Err(EmbeddingError::InvalidArgument(format!("sigma_obs must be >= 0, got {}", spec.sigma_obs)));
        }
        if let Some(f) = spec.floor_score {
            if !(-1.0..=1.0).contains(&f) {
                return Err(EmbeddingError::InvalidArgument(format!("floor_score must lie in [-1, 1], got {f}")));
            }
        }
        if spec.confusers.iter().any(|c| !(c.x.is_finite() && c.y.is_finite() && c.heading.is_finite())) {
            return Err(EmbeddingError::InvalidArgument("confuser poses must be finite".into()));
        }
        let mut masked = vec![false; grid.tile_count()];
        for rect in &spec.mask {
            if rect.rows[0] > rect.rows[1] || rect.cols[0] > rect.cols[1] {
                return Err(EmbeddingError::InvalidArgument(format!("mask rectangle {rect:?} is empty")));
            }
            if rect.rows[1] >= grid.rows() || rect.cols[1] >= grid.cols() {
                return Err(EmbeddingError::InvalidArgument(format!("mask rectangle {rect:?} leaves the grid")));
            }
            for r in rect.rows[0]..=rect.rows[1] {
                for c in rect.cols[0]..=rect.cols[1] {
                    masked[grid.linear_index(TileIndex::new(r, c))] = true;
                }
            }
        }
        Ok(Self { spec, grid, masked })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn is_masked(&self, tile: TileIndex) -> bool {
        self.masked[self.grid.linear_index(tile)]
    }

    pub fn is_masked_point(&self, p: Point) -> bool {
        self.grid.tile_of(p).map(|t| self.is_masked(t)).unwrap_or(false)
    }

    fn kernel(&self, p: Point, psi: f64, target: &Pose, kappa: f64) -> f64 {
        let d2 = (p.x - target.x).powi(2) + (p.y - target.y).powi(2);
        let rho2 = self.spec.rho * self.spec.rho;
        (-d2 / (2.0 * rho2) - kappa * (1.0 - (psi - target.heading).cos())).exp()
    }
}

/// One step's observation of the synthetic world from the true pose.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticObservation<'a> {
    world: &'a SyntheticWorld,
    true_pose: Pose,
    mode: ObservationMode,
}

pub fn synth_observe(world: &SyntheticWorld, true_pose: Pose, mode: ObservationMode) -> SyntheticObservation<'_> {
    SyntheticObservation { world, true_pose, mode }
}

impl SyntheticObservation<'_> {
    pub fn true_pose(&self) -> Pose {
        self.true_pose
    }

    pub fn mode(&self) -> ObservationMode {
        self.mode
    }

    /// The base embedding the ground backbone would produce for this
    /// observation.
    pub fn base_embedding<E: BaseEncoder>(&self, encoder: &E) -> BaseEmbedding {
        encoder.encode(&self.true_pose)
    }

    /// Noise-free score of a single hypothesis at `p` with heading `psi`.
    pub fn clean_score(&self, p: Point, psi: f64) -> Score {
        let world = self.world;
        let tile = world.grid.tile_of(p).ok()?;
        if world.is_masked(tile) {
            return world.spec.floor_score;
        }
        let (at, kappa) = match self.mode {
            ObservationMode::PoseAware => (p, world.spec.kappa),
            ObservationMode::HeadingOnly => (world.grid.tile_center(tile), world.spec.kappa),
            ObservationMode::OrientationBlind => (world.grid.tile_center(tile), 0.0),
        };
        let mut s = world.kernel(at, psi, &self.true_pose, kappa);
        for c in &world.spec.confusers {
            s += world.kernel(at, psi, c, kappa);
        }
        Some(s)
    }

    /// Scores every particle at the shared measured `heading`. Noise is drawn
    /// once per particle, in particle order, whether or not the particle
    /// ends up with an observation.
    pub fn score_particles<R: Rng + ?Sized>(&self, particles: &[Particle], heading: f64, rng: &mut R) -> Vec<Score> {
        let sigma = self.world.spec.sigma_obs;
        let noise: Vec<f64> = if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("sigma validated");
            (0..particles.len()).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; particles.len()]
        };
        particles
            .par_iter()
            .zip(noise.par_iter())
            .map(|(p, &eps)| {
                let p = p.position();
                let tile = self.world.grid.tile_of(p).ok()?;
                if self.world.is_masked(tile) {
                    return self.world.spec.floor_score;
                }
                self.clean_score(p, heading).map(|s| (s + eps).clamp(-1.0, 1.0))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn world(spec: WorldSpec) -> SyntheticWorld {
        let grid = TileGrid::new(Point::new(0.0, 0.0), 60.0, 10, 10).unwrap();
        SyntheticWorld::new(spec, grid).unwrap()
    }

    fn noiseless() -> WorldSpec {
        WorldSpec { sigma_obs: 0.0, rho: 60.0, kappa: 2.0, ..WorldSpec::default() }
    }

    fn particle(x: f64, y: f64) -> Particle {
        Particle { x, y, weight: 1.0 }
    }

    #[test]
    fn kernel_peak_at_truth() {
        let w = world(noiseless());
        let obs = synth_observe(&w, Pose::new(300.0, 300.0, 0.5), ObservationMode::PoseAware);
        let mut rng = stream(0, Purpose::Observation);
        let s = obs.score_particles(&[particle(300.0, 300.0)], 0.5, &mut rng);
        assert_eq!(s, vec![Some(1.0)]);
    }

    #[test]
    fn kernel_at_one_rho() {
        for kappa in [0.0, 1.0, 7.5] {
            let w = world(WorldSpec { kappa, ..noiseless() });
            let obs = synth_observe(&w, Pose::new(300.0, 300.0, -1.0), ObservationMode::PoseAware);
            let s = obs.clean_score(Point::new(360.0, 300.0), -1.0).unwrap();
            assert!((s - (-0.5f64).exp()).abs() < 1e-15);
            assert!((s - 0.6065).abs() < 1e-4);
        }
    }

    #[test]
    fn mask_dominates() {
        let spec = WorldSpec {
            mask: vec![TileRect { rows: [5, 5], cols: [5, 5] }],
            floor_score: Some(0.0),
            ..noiseless()
        };
        let w = world(spec);
        let obs = synth_observe(&w, Pose::new(330.0, 330.0, 0.0), ObservationMode::PoseAware);
        let mut rng = stream(0, Purpose::Observation);
        let s = obs.score_particles(&[particle(330.0, 330.0), particle(390.0, 330.0)], 0.0, &mut rng);
        assert_eq!(s[0], Some(0.0));
        assert!(s[1].unwrap() > 0.5);

        let hard = world(WorldSpec { mask: vec![TileRect { rows: [5, 5], cols: [5, 5] }], ..noiseless() });
        let obs = synth_observe(&hard, Pose::new(330.0, 330.0, 0.0), ObservationMode::PoseAware);
        assert_eq!(obs.score_particles(&[particle(330.0, 330.0)], 0.0, &mut rng), vec![None]);
    }

    #[test]
    fn out_of_grid_has_no_observation() {
        let w = world(WorldSpec::default());
        let obs = synth_observe(&w, Pose::new(30.0, 30.0, 0.0), ObservationMode::PoseAware);
        let mut rng = stream(0, Purpose::Observation);
        assert_eq!(obs.score_particles(&[particle(-1.0, 30.0)], 0.0, &mut rng), vec![None]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let grid = TileGrid::new(Point::new(0.0, 0.0), 60.0, 4, 4).unwrap();
        let bad = [
            WorldSpec { rho: 0.0, ..WorldSpec::default() },
            WorldSpec { kappa: -1.0, ..WorldSpec::default() },
            WorldSpec { sigma_obs: -0.1, ..WorldSpec::default() },
            WorldSpec { floor_score: Some(2.0), ..WorldSpec::default() },
            WorldSpec { mask: vec![TileRect { rows: [0, 4], cols: [0, 0] }], ..WorldSpec::default() },
            WorldSpec { mask: vec![TileRect { rows: [2, 1], cols: [0, 0] }], ..WorldSpec::default() },
        ];
        for spec in bad {
            assert!(SyntheticWorld::new(spec.clone(), grid).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn orientation_blind_scores_per_tile() {
        let w = world(noiseless());
        let obs = synth_observe(&w, Pose::new(310.0, 290.0, 0.3), ObservationMode::OrientationBlind);
        let a = obs.clean_score(Point::new(301.0, 301.0), 2.0);
        let b = obs.clean_score(Point::new(359.0, 359.0), -2.0);
        assert_eq!(a, b);
        let heading_only = synth_observe(&w, Pose::new(310.0, 290.0, 0.3), ObservationMode::HeadingOnly);
        let c = heading_only.clean_score(Point::new(301.0, 301.0), 0.3);
        let d = heading_only.clean_score(Point::new(359.0, 359.0), 0.3);
        assert_eq!(c, d);
        assert_ne!(heading_only.clean_score(Point::new(301.0, 301.0), 2.0), c);
    }

    #[test]
    fn confusers_add() {
        let confuser = Pose::new(100.0, 100.0, 0.0);
        let w = world(WorldSpec { confusers: vec![confuser], ..noiseless() });
        let obs = synth_observe(&w, Pose::new(500.0, 500.0, 0.0), ObservationMode::PoseAware);
        let at_confuser = obs.clean_score(Point::new(100.0, 100.0), 0.0).unwrap();
        assert!(at_confuser > 0.999);
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let w = world(WorldSpec { sigma_obs: 0.5, ..WorldSpec::default() });
        let obs = synth_observe(&w, Pose::new(300.0, 300.0, 0.0), ObservationMode::PoseAware);
        let ps: Vec<Particle> = (0..500).map(|i| particle(250.0 + i as f64 * 0.2, 300.0)).collect();
        let a = obs.score_particles(&ps, 0.0, &mut stream(3, Purpose::Observation));
        let b = obs.score_particles(&ps, 0.0, &mut stream(3, Purpose::Observation));
        assert_eq!(a, b);
        assert!(a.iter().all(|s| (-1.0..=1.0).contains(&s.unwrap())));
    }

    #[test]
    fn noiseless_score_is_maximized_at_truth() {
        let w = world(noiseless());
        let truth = Pose::new(247.0, 318.0, 0.9);
        let obs = synth_observe(&w, truth, ObservationMode::PoseAware);
        let best_at_truth = obs.clean_score(truth.position(), truth.heading).unwrap();
        let mut best = f64::MIN;
        let mut arg = (0.0, 0.0, 0.0);
        for ix in 0..120 {
            for iy in 0..120 {
                for ih in 0..16 {
                    let p = Point::new(ix as f64 * 5.0 + 0.5, iy as f64 * 5.0 + 0.5);
                    let psi = -std::f64::consts::PI + ih as f64 * std::f64::consts::PI / 8.0;
                    let s = obs.clean_score(p, psi).unwrap();
                    if s > best {
                        best = s;
                        arg = (p.x, p.y, psi);
                    }
                }
            }
        }
        assert!(best <= best_at_truth);
        assert!((arg.0 - truth.x).abs() <= 5.0 && (arg.1 - truth.y).abs() <= 5.0, "{arg:?}");
    }
}
