use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use geoloc::embeddings::{load_store, ObservationMode};
use geoloc::filter::ResampleStrategy;
use geoloc::grid::{Point, TileGrid};
use geoloc::io::{self, IoError};
use geoloc::losses::{check_gradients, fancy_pca_augment, fancy_pca_shift};
use geoloc::metrics::{compare, format_convergence, summarize, RunSummary};
use geoloc::rng::{stream, Purpose};
use geoloc::sim::{run_experiment, run_experiment_with, ExperimentConfig, SimError};
use geoloc::Error;

/// Particle-filter geolocalization experiments on a synthetic tiled world.
#[derive(Parser)]
#[command(name = "geoloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its per-step metrics.
    Run(RunArgs),
    /// Compare observation modes on seed-matched runs.
    Ablate(FanOutArgs),
    /// Compare resampling strategies on seed-matched runs.
    ResampleBench(FanOutArgs),
    /// Apply Fancy PCA colour augmentation to a raw RGB32F image.
    Augment(AugmentArgs),
    /// Check loss gradients against central differences.
    LossCheck(LossCheckArgs),
    /// Lint an embedding store file against a grid shape.
    ValidateStore(ValidateStoreArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dump the particle set every K steps (and at the last step); 0 disables.
    #[arg(long, default_value_t = 0)]
    dump_every: usize,
}

#[derive(Args)]
struct FanOutArgs {
    #[arg(long)]
    config: PathBuf,
    /// First seed; defaults to the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds per arm.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Comma-separated arm names; defaults to every arm.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplier on the 0.1 standard deviation of the eigen-coefficients.
    #[arg(long, default_value_t = 1.0)]
    alpha_scale: f64,
}

#[derive(Args)]
struct LossCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args)]
struct ValidateStoreArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long, default_value_t = 60.0)]
    spacing: f64,
    /// Required embedding width.
    #[arg(long)]
    dim: Option<usize>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

macro_rules! impl_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

impl_from!(IoError, SimError, geoloc::embeddings::EmbeddingError, geoloc::losses::LossError, geoloc::metrics::MetricsError, geoloc::grid::GridError);

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut config = io::load_config(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn print_config(config: &ExperimentConfig) {
    print!("{}", io::config_to_json(config));
}

fn print_summary(s: &RunSummary) {
    println!(
        "{} seed={} steps={} final_error={:.2} average_error={:.2} final_std={:.2} convergence={} resamples={}",
        s.label,
        s.seed,
        s.steps,
        s.final_error,
        s.average_error,
        s.final_std,
        format_convergence(s.convergence_time),
        s.resample_count
    );
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let config = load_with_seed(&args.config, args.seed)?;
    print_config(&config);
    create_dir(&args.out)?;
    io::save_config(&config, &args.out.join("config.json"))?;
    let dump_dir = args.out.join("particles");
    if args.dump_every > 0 {
        create_dir(&dump_dir)?;
    }
    let mut dump_error = None;
    let log = run_experiment_with(&config, |view| {
        let t = view.record.step;
        let last = t + 1 == view.total_steps;
        if args.dump_every > 0 && dump_error.is_none() && (t % args.dump_every == 0 || last) {
            if let Err(e) = io::write_particles(view.particles, t, &dump_dir.join(format!("step-{t:05}.csv"))) {
                dump_error = Some(e);
            }
        }
    })?;
    if let Some(e) = dump_error {
        return Err(e.into());
    }
    io::write_metrics(&log, &args.out.join("metrics.csv"))?;
    let summary = summarize(&log, "run", config.seed, config.convergence_radius)?;
    io::write_summaries(std::slice::from_ref(&summary), &args.out.join("summary.csv"))?;
    print_summary(&summary);
    Ok(())
}

fn fan_out<A, F>(args: &FanOutArgs, arms: &[A], label: fn(&A) -> &'static str, apply: F) -> Result<(), Failure>
where
    A: Sync,
    F: Fn(&mut ExperimentConfig, &A) + Sync,
{
    let base = load_with_seed(&args.config, args.seed)?;
    print_config(&base);
    if args.seeds == 0 {
        return Err(Failure::Validation("--seeds must be at least 1".into()));
    }
    create_dir(&args.out)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|k| base.seed.wrapping_add(k)).collect();
    let jobs: Vec<(usize, u64)> = (0..arms.len()).flat_map(|a| seeds.iter().map(move |&s| (a, s))).collect();
    let results: Vec<Result<RunSummary, Failure>> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let mut config = base.clone();
            config.seed = seed;
            apply(&mut config, &arms[a]);
            let log = run_experiment(&config)?;
            let dir = args.out.join(label(&arms[a])).join(format!("seed-{seed}"));
            create_dir(&dir)?;
            io::save_config(&config, &dir.join("config.json"))?;
            io::write_metrics(&log, &dir.join("metrics.csv"))?;
            Ok(summarize(&log, label(&arms[a]), seed, config.convergence_radius)?)
        })
        .collect();
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        summaries.push(r?);
    }
    for s in &summaries {
        print_summary(s);
    }
    io::write_summaries(&summaries, &args.out.join("summaries.csv"))?;
    let grouped: Vec<(String, Vec<RunSummary>)> = arms
        .iter()
        .map(|a| (label(a).to_string(), summaries.iter().filter(|s| s.label == label(a)).cloned().collect()))
        .collect();
    let comparison = compare(&grouped)?;
    println!();
    print!("{comparison}");
    let json = serde_json::to_string_pretty(&comparison).expect("comparison serializes");
    let path = args.out.join("comparison.json");
    io::atomic_write(&path, json.as_bytes()).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn parse_arms<T: std::str::FromStr<Err = String> + Copy>(names: &Option<Vec<String>>, all: &[T]) -> Result<Vec<T>, Failure> {
    match names {
        None => Ok(all.to_vec()),
        Some(names) => names.iter().map(|n| n.trim().parse::<T>().map_err(Failure::Validation)).collect(),
    }
}

fn ablate(args: FanOutArgs) -> Result<(), Failure> {
    let arms = parse_arms(&args.arms, &ObservationMode::ALL)?;
    fan_out(&args, &arms, |m| m.label(), |c, m| c.ablation = *m)
}

fn resample_bench(args: FanOutArgs) -> Result<(), Failure> {
    let arms = parse_arms(&args.arms, &ResampleStrategy::ALL)?;
    fan_out(&args, &arms, |s| s.label(), |c, s| c.resampling.strategy = *s)
}

fn augment(args: AugmentArgs) -> Result<(), Failure> {
    let image = io::load_image(&args.input)?;
    let shift = fancy_pca_shift(&image, args.alpha_scale, &mut stream(args.seed, Purpose::Augmentation))?;
    let out = fancy_pca_augment(&image, args.alpha_scale, &mut stream(args.seed, Purpose::Augmentation))?;
    io::write_image(&out, &args.output)?;
    println!(
        "{}x{} image, rgb shift [{:.6}, {:.6}, {:.6}] -> {}",
        image.width(),
        image.height(),
        shift[0],
        shift[1],
        shift[2],
        args.output.display()
    );
    Ok(())
}

fn loss_check(args: LossCheckArgs) -> Result<(), Failure> {
    let report = check_gradients(args.points, &mut stream(args.seed, Purpose::Augmentation))?;
    println!("points: {}", report.points);
    println!("triplet max relative error: {:.3e}", report.triplet_max_rel_err);
    println!("trinomial max relative error: {:.3e}", report.trinomial_max_rel_err);
    if report.triplet_max_rel_err < args.tolerance && report.trinomial_max_rel_err < args.tolerance {
        println!("ok (tolerance {:.1e})", args.tolerance);
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient mismatch exceeds tolerance {:.1e}", args.tolerance)))
    }
}

fn validate_store(args: ValidateStoreArgs) -> Result<(), Failure> {
    let grid = TileGrid::new(Point::new(0.0, 0.0), args.spacing, args.rows, args.cols)?;
    let store = load_store(&args.store, &grid, args.dim)?;
    println!("ok: {} x {} tiles, dim {}", store.rows(), store.cols(), store.dim());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
        Command::ResampleBench(a) => resample_bench(a),
        Command::Augment(a) => augment(a),
        Command::LossCheck(a) => loss_check(a),
        Command::ValidateStore(a) => validate_store(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
