//! Synthetic-world experiment runner.
//!
//! A run generates a ground-truth trajectory, corrupts its odometry and
//! heading, and then for each step propagates the particles, scores them
//! against the synthetic world, reweights, resamples when the ESS gate says
//! so, and records the estimate. Every random draw comes from a stream
//! derived from the master seed, so a config fully determines its output.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::{synth_observe, EmbeddingError, ObservationMode, SyntheticWorld, WorldSpec};
use crate::filter::{FilterError, MeasurementModel, OdometryStep, ParticleSet, ResampleStrategy};
use crate::grid::{wrap_angle, GridError, Point, Pose, TileGrid};
use crate::rng::{stream, CounterNormals, Purpose};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("trajectory: {0}")]
    Trajectory(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

fn invalid(field: &str, message: impl Into<String>) -> SimError {
    SimError::Validation { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub origin: Point,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    pub rows: usize,
    pub cols: usize,
}

fn default_spacing() -> f64 {
    60.0
}

impl GridSpec {
    pub fn build(&self) -> Result<TileGrid, SimError> {
        if !self.origin.is_finite() {
            return Err(invalid("grid.origin", "must be finite"));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(invalid("grid.spacing", format!("must be > 0, got {}", self.spacing)));
        }
        if self.rows == 0 {
            return Err(invalid("grid.rows", "must be at least 1"));
        }
        if self.cols == 0 {
            return Err(invalid("grid.cols", "must be at least 1"));
        }
        Ok(TileGrid::new(self.origin, self.spacing, self.rows, self.cols)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Piecewise-linear path sampled every `speed` meters.
    Waypoints { points: Vec<Point>, speed: f64 },
    /// Constant-speed walk whose heading changes by at most `max_turn`
    /// radians per step. `start` defaults to the grid center.
    RandomWalk {
        #[serde(default)]
        start: Option<Point>,
        #[serde(default)]
        start_heading: f64,
        steps: usize,
        speed: f64,
        max_turn: f64,
    },
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self::RandomWalk { start: None, start_heading: 0.0, steps: 200, speed: 30.0, max_turn: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSpec {
    /// Distance of the initial Gaussian's center from the true start, meters.
    pub offset_m: f64,
    /// Direction of the offset; drawn from the seed when absent.
    pub bearing: Option<f64>,
    pub sigma_m: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { offset_m: 1300.0, bearing: None, sigma_m: 900.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResamplingSpec {
    pub strategy: ResampleStrategy,
    /// Resample when ESS < `ess_threshold * N`.
    pub ess_threshold: f64,
}

impl Default for ResamplingSpec {
    fn default() -> Self {
        Self { strategy: ResampleStrategy::Systematic, ess_threshold: 0.98 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridSpec,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default)]
    pub init: InitSpec,
    /// Odometry noise std as a fraction of the step length.
    #[serde(default = "default_odometry_noise")]
    pub odometry_noise: f64,
    /// Heading noise std as a fraction of the per-step heading change.
    #[serde(default = "default_heading_noise")]
    pub heading_noise: f64,
    #[serde(default)]
    pub measurement: MeasurementModel,
    #[serde(default)]
    pub resampling: ResamplingSpec,
    #[serde(default)]
    pub ablation: ObservationMode,
    #[serde(default = "default_convergence_radius")]
    pub convergence_radius: f64,
}

fn default_particles() -> usize {
    30_000
}

fn default_odometry_noise() -> f64 {
    0.02
}

fn default_heading_noise() -> f64 {
    0.01
}

fn default_convergence_radius() -> f64 {
    60.0
}

impl ExperimentConfig {
    /// Config with every optional field at its default.
    pub fn with_grid(seed: u64, grid: GridSpec) -> Self {
        Self {
            seed,
            grid,
            world: WorldSpec::default(),
            trajectory: TrajectorySpec::default(),
            particles: default_particles(),
            init: InitSpec::default(),
            odometry_noise: default_odometry_noise(),
            heading_noise: default_heading_noise(),
            measurement: MeasurementModel::default(),
            resampling: ResamplingSpec::default(),
            ablation: ObservationMode::default(),
            convergence_radius: default_convergence_radius(),
        }
    }

    /// Checks every field; the error names the first offending one.
    pub fn validate(&self) -> Result<(), SimError> {
        let grid = self.grid.build()?;
        let w = &self.world;
        if !(w.rho.is_finite() && w.rho > 0.0) {
            return Err(invalid("world.rho", format!("must be > 0, got {}", w.rho)));
        }
        if !(w.kappa.is_finite() && w.kappa >= 0.0) {
            return Err(invalid("world.kappa", format!("must be >= 0, got {}", w.kappa)));
        }
        if !(w.sigma_obs.is_finite() && w.sigma_obs >= 0.0) {
            return Err(invalid("world.sigma_obs", format!("must be >= 0, got {}", w.sigma_obs)));
        }
        if let Some(f) = w.floor_score {
            if !(-1.0..=1.0).contains(&f) {
                return Err(invalid("world.floor_score", format!("must lie in [-1, 1], got {f}")));
            }
        }
        SyntheticWorld::new(w.clone(), grid).map_err(|e| invalid("world.mask", e.to_string()))?;
        self.validate_trajectory(&grid)?;
        if self.particles == 0 {
            return Err(invalid("particles", "must be at least 1"));
        }
        if !(self.init.offset_m.is_finite() && self.init.offset_m >= 0.0) {
            return Err(invalid("init.offset_m", format!("must be >= 0, got {}", self.init.offset_m)));
        }
        if let Some(b) = self.init.bearing {
            if !b.is_finite() {
                return Err(invalid("init.bearing", "must be finite"));
            }
        }
        if !(self.init.sigma_m.is_finite() && self.init.sigma_m > 0.0) {
            return Err(invalid("init.sigma_m", format!("must be > 0, got {}", self.init.sigma_m)));
        }
        if !(self.odometry_noise.is_finite() && self.odometry_noise >= 0.0) {
            return Err(invalid("odometry_noise", format!("must be >= 0, got {}", self.odometry_noise)));
        }
        if !(self.heading_noise.is_finite() && self.heading_noise >= 0.0) {
            return Err(invalid("heading_noise", format!("must be >= 0, got {}", self.heading_noise)));
        }
        let m = &self.measurement;
        if !m.mu.is_finite() {
            return Err(invalid("measurement.mu", "must be finite"));
        }
        if !(m.sigma.is_finite() && m.sigma > 0.0) {
            return Err(invalid("measurement.sigma", format!("must be > 0, got {}", m.sigma)));
        }
        if !(m.floor.is_finite() && m.floor > 0.0) {
            return Err(invalid("measurement.floor", format!("must be > 0, got {}", m.floor)));
        }
        let t = self.resampling.ess_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(invalid("resampling.ess_threshold", format!("must lie in (0, 1], got {t}")));
        }
        if !(self.convergence_radius.is_finite() && self.convergence_radius > 0.0) {
            return Err(invalid("convergence_radius", format!("must be > 0, got {}", self.convergence_radius)));
        }
        Ok(())
    }

    fn validate_trajectory(&self, grid: &TileGrid) -> Result<(), SimError> {
        match &self.trajectory {
            TrajectorySpec::Waypoints { points, speed } => {
                if points.is_empty() {
                    return Err(invalid("trajectory.points", "needs at least one waypoint"));
                }
                if let Some(p) = points.iter().find(|p| !grid.contains(**p)) {
                    return Err(invalid("trajectory.points", format!("waypoint {p} lies outside the grid")));
                }
                if !(speed.is_finite() && *speed > 0.0) {
                    return Err(invalid("trajectory.speed", format!("must be > 0, got {speed}")));
                }
            }
            TrajectorySpec::RandomWalk { start, start_heading, steps, speed, max_turn } => {
                if let Some(p) = start {
                    if !grid.contains(*p) {
                        return Err(invalid("trajectory.start", format!("{p} lies outside the grid")));
                    }
                }
                if !start_heading.is_finite() {
                    return Err(invalid("trajectory.start_heading", "must be finite"));
                }
                if *steps == 0 {
                    return Err(invalid("trajectory.steps", "must be at least 1"));
                }
                if !(speed.is_finite() && *speed >= 0.0) {
                    return Err(invalid("trajectory.speed", format!("must be >= 0, got {speed}")));
                }
                if !(max_turn.is_finite() && *max_turn >= 0.0) {
                    return Err(invalid("trajectory.max_turn", format!("must be >= 0, got {max_turn}")));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth poses, one per filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self, SimError> {
        if poses.is_empty() {
            return Err(SimError::Trajectory("a trajectory needs at least one pose".into()));
        }
        if poses.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.heading.is_finite())) {
            return Err(SimError::Trajectory("trajectory poses must be finite".into()));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

pub fn generate_trajectory<R: Rng + ?Sized>(spec: &TrajectorySpec, grid: &TileGrid, rng: &mut R) -> Result<Trajectory, SimError> {
    match spec {
        TrajectorySpec::Waypoints { points, speed } => waypoint_path(points, *speed, grid),
        TrajectorySpec::RandomWalk { start, start_heading, steps, speed, max_turn } => {
            let start = start.unwrap_or_else(|| grid.center_point());
            random_walk(start, *start_heading, *steps, *speed, *max_turn, grid, rng)
        }
    }
}

fn waypoint_path(points: &[Point], speed: f64, grid: &TileGrid) -> Result<Trajectory, SimError> {
    if points.is_empty() {
        return Err(SimError::Trajectory("no waypoints".into()));
    }
    if let Some(p) = points.iter().find(|p| !grid.contains(**p)) {
        return Err(SimError::Trajectory(format!("waypoint {p} lies outside the grid")));
    }
    if !(speed.is_finite() && speed > 0.0) {
        return Err(SimError::Trajectory(format!("speed must be > 0, got {speed}")));
    }
    let segments: Vec<(Point, Point, f64)> = points
        .windows(2)
        .map(|w| (w[0], w[1], w[0].distance(&w[1])))
        .filter(|s| s.2 > 0.0)
        .collect();
    if segments.is_empty() {
        return Trajectory::new(vec![Pose::new(points[0].x, points[0].y, 0.0)]);
    }
    let total: f64 = segments.iter().map(|s| s.2).sum();
    let heading_of = |s: &(Point, Point, f64)| (s.1.y - s.0.y).atan2(s.1.x - s.0.x);
    let count = (total / speed + 1e-9).floor() as usize;
    let mut poses = Vec::with_capacity(count + 2);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..=count {
        let s = (k as f64 * speed).min(total);
        while seg + 1 < segments.len() && s >= seg_start + segments[seg].2 {
            seg_start += segments[seg].2;
            seg += 1;
        }
        let (a, b, len) = segments[seg];
        let f = ((s - seg_start) / len).clamp(0.0, 1.0);
        poses.push(Pose::new(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y), heading_of(&segments[seg])));
    }
    let end = *points.last().expect("non-empty");
    let last = poses.last().expect("at least one pose").position();
    if last.distance(&end) > 1e-9 {
        poses.push(Pose::new(end.x, end.y, heading_of(segments.last().expect("non-empty"))));
    }
    Trajectory::new(poses)
}

fn random_walk<R: Rng + ?Sized>(
    start: Point,
    start_heading: f64,
    steps: usize,
    speed: f64,
    max_turn: f64,
    grid: &TileGrid,
    rng: &mut R,
) -> Result<Trajectory, SimError> {
    if !grid.contains(start) {
        return Err(SimError::Trajectory(format!("start {start} lies outside the grid")));
    }
    if steps == 0 {
        return Err(SimError::Trajectory("steps must be at least 1".into()));
    }
    let center = grid.center_point();
    let (min, max) = (grid.origin(), grid.max_corner());
    let inside_margin = |p: Point, m: f64| p.x >= min.x + m && p.x <= max.x - m && p.y >= min.y + m && p.y <= max.y - m;
    let mut pos = start;
    let mut heading = wrap_angle(start_heading);
    let mut poses = Vec::with_capacity(steps);
    poses.push(Pose::new(pos.x, pos.y, heading));
    for step in 1..steps {
        let mut turn = if max_turn > 0.0 { rng.random_range(-max_turn..=max_turn) } else { 0.0 };
        if max_turn > 0.0 {
            // steer toward the interior when the turning circle would leave the grid
            let radius = speed / max_turn;
            let reach = 2.0 * radius + 2.0 * speed;
            let ahead = Point::new(pos.x + reach * heading.cos(), pos.y + reach * heading.sin());
            if !inside_margin(ahead, speed) {
                let to_center = (center.x - pos.x, center.y - pos.y);
                let cross = heading.cos() * to_center.1 - heading.sin() * to_center.0;
                turn = if cross >= 0.0 { max_turn } else { -max_turn };
            }
        }
        heading = wrap_angle(heading + turn);
        pos = Point::new(pos.x + speed * heading.cos(), pos.y + speed * heading.sin());
        if !grid.contains(pos) {
            return Err(SimError::Trajectory(format!("random walk left the grid at step {step} ({pos})")));
        }
        poses.push(Pose::new(pos.x, pos.y, heading));
    }
    Trajectory::new(poses)
}

/// Measured motion between consecutive poses plus the compass heading at
/// every pose.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyOdometry {
    pub steps: Vec<OdometryStep>,
    pub headings: Vec<f64>,
}

/// Displacement noise has per-axis std `odo_frac * |delta|`; heading noise
/// has std `heading_frac * |delta psi|`. Three normals are drawn per step in
/// (x, y, heading) order.
pub fn noisy_odometry<R: Rng + ?Sized>(
    truth: &Trajectory,
    odo_frac: f64,
    heading_frac: f64,
    rng: &mut R,
) -> Result<NoisyOdometry, SimError> {
    if !(odo_frac.is_finite() && odo_frac >= 0.0) {
        return Err(invalid("odometry_noise", format!("must be >= 0, got {odo_frac}")));
    }
    if !(heading_frac.is_finite() && heading_frac >= 0.0) {
        return Err(invalid("heading_noise", format!("must be >= 0, got {heading_frac}")));
    }
    let poses = truth.poses();
    let mut headings = Vec::with_capacity(poses.len());
    headings.push(wrap_angle(poses[0].heading));
    let mut steps = Vec::with_capacity(poses.len().saturating_sub(1));
    for w in poses.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let dpsi = wrap_angle(b.heading - a.heading);
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let nh: f64 = rng.sample(StandardNormal);
        let std = odo_frac * dx.hypot(dy);
        let heading = wrap_angle(b.heading + heading_frac * dpsi.abs() * nh);
        let previous = *headings.last().expect("seeded with the first heading");
        steps.push(OdometryStep { dx: dx + std * nx, dy: dy + std * ny, dpsi: wrap_angle(heading - previous) });
        headings.push(heading);
    }
    Ok(NoisyOdometry { steps, headings })
}

/// Per-step filter output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Distance between the weighted mean and the true position, meters.
    pub error: f64,
    /// ESS after reweighting, before any resampling.
    pub ess: f64,
    pub resampled: bool,
    pub rms_dispersion: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub estimate: Point,
    pub truth: Point,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_error(&self) -> Option<f64> {
        self.steps.last().map(|s| s.error)
    }

    pub fn average_error(&self) -> Option<f64> {
        if self.steps.is_empty() {
            return None;
        }
        Some(self.steps.iter().map(|s| s.error).sum::<f64>() / self.steps.len() as f64)
    }

    /// First step from which the RMS dispersion stays below `radius` until
    /// the end of the run.
    pub fn convergence_time(&self, radius: f64) -> Option<usize> {
        let mut first = None;
        for s in self.steps.iter().rev() {
            if s.rms_dispersion < radius {
                first = Some(s.step);
            } else {
                break;
            }
        }
        first
    }

    pub fn resample_count(&self) -> usize {
        self.steps.iter().filter(|s| s.resampled).count()
    }
}

fn init_center<R: Rng + ?Sized>(start: Pose, init: &InitSpec, grid: &TileGrid, rng: &mut R) -> Result<Point, SimError> {
    let at = |bearing: f64| Point::new(start.x + init.offset_m * bearing.cos(), start.y + init.offset_m * bearing.sin());
    if let Some(b) = init.bearing {
        let c = at(b);
        return if grid.contains(c) {
            Ok(c)
        } else {
            Err(invalid("init.bearing", format!("initial center {c} lies outside the grid")))
        };
    }
    for _ in 0..256 {
        let c = at(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        if grid.contains(c) {
            return Ok(c);
        }
    }
    Err(invalid("init.offset_m", format!("no bearing places a {} m offset inside the grid", init.offset_m)))
}

/// Everything a step observer can see.
pub struct StepView<'a> {
    pub record: &'a StepRecord,
    pub particles: &'a ParticleSet,
    pub truth: Pose,
    pub total_steps: usize,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsLog, SimError> {
    run_experiment_with(config, |_| {})
}

/// Runs the experiment and hands every finished step to `observer`.
pub fn run_experiment_with<F>(config: &ExperimentConfig, mut observer: F) -> Result<MetricsLog, SimError>
where
    F: FnMut(StepView<'_>),
{
    config.validate()?;
    let seed = config.seed;
    let grid = config.grid.build()?;
    let world = SyntheticWorld::new(config.world.clone(), grid)?;
    let trajectory = generate_trajectory(&config.trajectory, &grid, &mut stream(seed, Purpose::Trajectory))?;
    let odometry = noisy_odometry(
        &trajectory,
        config.odometry_noise,
        config.heading_noise,
        &mut stream(seed, Purpose::Odometry),
    )?;

    let mut init_rng = stream(seed, Purpose::Init);
    let center = init_center(trajectory.poses()[0], &config.init, &grid, &mut init_rng)?;
    let mut set = ParticleSet::init_gaussian(center, config.init.sigma_m, config.particles, &mut init_rng)?;
    let mut observation_rng = stream(seed, Purpose::Observation);
    let mut resample_rng = stream(seed, Purpose::Resampling);

    let mut log = MetricsLog { steps: Vec::with_capacity(trajectory.len()) };
    for (t, truth) in trajectory.poses().iter().enumerate() {
        if t > 0 {
            let noise = CounterNormals::new(seed, Purpose::Propagation, t as u32);
            set.propagate(&odometry.steps[t - 1], config.odometry_noise, &noise)?;
        }
        let heading = odometry.headings[t];
        let observation = synth_observe(&world, *truth, config.ablation);
        let scores = observation.score_particles(set.particles(), heading, &mut observation_rng);
        set.reweight(&scores, &config.measurement)?;
        let ess = set.ess()?;
        let resampled = set.maybe_resample(config.resampling.ess_threshold, config.resampling.strategy, &mut resample_rng)?;
        let est = set.estimate()?;
        let record = StepRecord {
            step: t,
            error: est.mean.distance(&truth.position()),
            ess,
            resampled,
            rms_dispersion: est.rms_dispersion,
            std_x: est.std_x,
            std_y: est.std_y,
            estimate: est.mean,
            truth: truth.position(),
        };
        observer(StepView { record: &record, particles: &set, truth: *truth, total_steps: trajectory.len() });
        log.steps.push(record);
    }
    Ok(log)
}
