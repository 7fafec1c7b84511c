//! Config, CSV and raw-image persistence.
//!
//! Every writer goes through [`atomic_write`]: the bytes land in a temporary
//! file next to the target and are renamed over it, so a crash never leaves
//! a partial file at the target path.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::filter::ParticleSet;
use crate::grid::Point;
use crate::losses::RgbImage;
use crate::metrics::RunSummary;
use crate::sim::{ExperimentConfig, MetricsLog, SimError, StepRecord};

pub const METRICS_HEADER: &str = "step,error,ess,resampled,rms_dispersion,std_x,std_y,est_x,est_y,true_x,true_y";
pub const PARTICLES_HEADER: &str = "step,index,x,y,weight";
pub const POSE_LOG_HEADER: &str = "step,timestamp,x,y,heading,dx,dy,dpsi";
pub const SUMMARY_HEADER: &str = "label,seed,steps,final_error,average_error,final_std,convergence_time,resample_count";
pub const IMAGE_MAGIC: &str = "RGB32F";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("{path}: line {line}: {message}")]
    Row { path: String, line: u64, message: String },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format { path: path.display().to_string(), message: message.into() }
    }

    pub fn is_validation(&self) -> bool {
        !matches!(self, IoError::Io { .. })
    }
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it onto `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig, IoError> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| IoError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    config.validate().map_err(|e| match e {
        SimError::Validation { field, message } => IoError::Validation { field, message },
        other => IoError::Validation { field: "config".into(), message: other.to_string() },
    })?;
    Ok(config)
}

/// Parses and validates a JSON config, filling omitted fields with defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, IoError> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| IoError::format(path, "config is not UTF-8"))?;
    parse_config(text, path)
}

/// Pretty JSON with every field spelled out.
pub fn config_to_json(config: &ExperimentConfig) -> String {
    let mut s = serde_json::to_string_pretty(config).expect("config serializes");
    s.push('\n');
    s
}

pub fn save_config(config: &ExperimentConfig, path: &Path) -> Result<(), IoError> {
    atomic_write(path, config_to_json(config).as_bytes()).map_err(|e| IoError::io(path, e))
}

fn csv_bytes<F>(header: &str, rows: F) -> Vec<u8>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut out = Vec::new();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut out);
        w.write_record(header.split(',')).expect("writing to memory");
        rows(&mut w).expect("writing to memory");
        w.flush().expect("writing to memory");
    }
    out
}

fn reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(bytes)
}

fn check_header(path: &Path, rdr: &mut csv::Reader<&[u8]>, expected: &str) -> Result<(), IoError> {
    let header = rdr.headers().map_err(|e| IoError::format(path, e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    let want: Vec<&str> = expected.split(',').collect();
    if got != want {
        return Err(IoError::format(path, format!("expected header `{expected}`, got `{}`", got.join(","))));
    }
    Ok(())
}

fn row_error(path: &Path, e: csv::Error) -> IoError {
    let line = e.position().map_or(0, |p| p.line());
    IoError::Row { path: path.display().to_string(), line, message: e.to_string() }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsRow {
    step: usize,
    error: f64,
    ess: f64,
    resampled: u8,
    rms_dispersion: f64,
    std_x: f64,
    std_y: f64,
    est_x: f64,
    est_y: f64,
    true_x: f64,
    true_y: f64,
}

pub fn metrics_csv(log: &MetricsLog) -> Vec<u8> {
    csv_bytes(METRICS_HEADER, |w| {
        for s in &log.steps {
            w.serialize(MetricsRow {
                step: s.step,
                error: s.error,
                ess: s.ess,
                resampled: s.resampled as u8,
                rms_dispersion: s.rms_dispersion,
                std_x: s.std_x,
                std_y: s.std_y,
                est_x: s.estimate.x,
                est_y: s.estimate.y,
                true_x: s.truth.x,
                true_y: s.truth.y,
            })?;
        }
        Ok(())
    })
}

pub fn write_metrics(log: &MetricsLog, path: &Path) -> Result<(), IoError> {
    atomic_write(path, &metrics_csv(log)).map_err(|e| IoError::io(path, e))
}

pub fn load_metrics(path: &Path) -> Result<MetricsLog, IoError> {
    let bytes = read(path)?;
    let mut rdr = reader(&bytes);
    check_header(path, &mut rdr, METRICS_HEADER)?;
    let mut steps = Vec::new();
    for row in rdr.deserialize::<MetricsRow>() {
        let r = row.map_err(|e| row_error(path, e))?;
        steps.push(StepRecord {
            step: r.step,
            error: r.error,
            ess: r.ess,
            resampled: r.resampled != 0,
            rms_dispersion: r.rms_dispersion,
            std_x: r.std_x,
            std_y: r.std_y,
            estimate: Point::new(r.est_x, r.est_y),
            truth: Point::new(r.true_x, r.true_y),
        });
    }
    Ok(MetricsLog { steps })
}

/// One row per particle, tagged with the filter step.
pub fn write_particles(set: &ParticleSet, step: usize, path: &Path) -> Result<(), IoError> {
    let bytes = csv_bytes(PARTICLES_HEADER, |w| {
        for (i, p) in set.particles().iter().enumerate() {
            w.serialize((step, i, p.x, p.y, p.weight))?;
        }
        Ok(())
    });
    atomic_write(path, &bytes).map_err(|e| IoError::io(path, e))
}

pub fn write_summaries(summaries: &[RunSummary], path: &Path) -> Result<(), IoError> {
    let bytes = csv_bytes(SUMMARY_HEADER, |w| {
        for s in summaries {
            let conv = s.convergence_time.map_or_else(String::new, |t| t.to_string());
            w.write_record([
                s.label.clone(),
                s.seed.to_string(),
                s.steps.to_string(),
                s.final_error.to_string(),
                s.average_error.to_string(),
                s.final_std.to_string(),
                conv,
                s.resample_count.to_string(),
            ])?;
        }
        Ok(())
    });
    atomic_write(path, &bytes).map_err(|e| IoError::io(path, e))
}

/// One row of a recorded trajectory: ground-truth pose plus measured motion
/// since the previous row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseLogRecord {
    pub step: u64,
    pub timestamp: Option<f64>,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
}

pub fn parse_pose_log(bytes: &[u8], path: &Path) -> Result<Vec<PoseLogRecord>, IoError> {
    let mut rdr = reader(bytes);
    check_header(path, &mut rdr, POSE_LOG_HEADER)?;
    let headers = rdr.headers().map_err(|e| IoError::format(path, e.to_string()))?.clone();
    let mut out: Vec<PoseLogRecord> = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record).map_err(|e| row_error(path, e))? {
        let line = record.position().map_or(0, |p| p.line());
        let at = |message: String| IoError::Row { path: path.display().to_string(), line, message };
        let r: PoseLogRecord = record.deserialize(Some(&headers)).map_err(|e| at(e.to_string()))?;
        let finite = [r.x, r.y, r.heading, r.dx, r.dy, r.dpsi].iter().all(|v| v.is_finite())
            && r.timestamp.is_none_or(f64::is_finite);
        if !finite {
            return Err(at("non-finite value".into()));
        }
        if let Some(prev) = out.last() {
            if r.step <= prev.step {
                return Err(at(format!("step {} does not increase on step {}", r.step, prev.step)));
            }
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_pose_log(path: &Path) -> Result<Vec<PoseLogRecord>, IoError> {
    parse_pose_log(&read(path)?, path)
}

pub fn write_pose_log(records: &[PoseLogRecord], path: &Path) -> Result<(), IoError> {
    let bytes = csv_bytes(POSE_LOG_HEADER, |w| {
        for r in records {
            w.serialize(r)?;
        }
        Ok(())
    });
    atomic_write(path, &bytes).map_err(|e| IoError::io(path, e))
}

/// `RGB32F <width> <height>\n` followed by `width * height` pixels, row-major,
/// each three little-endian f32 (R, G, B).
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<RgbImage, IoError> {
    let newline = bytes
        .iter()
        .take(128)
        .position(|&b| b == b'\n')
        .ok_or_else(|| IoError::format(path, "missing image header"))?;
    let line = std::str::from_utf8(&bytes[..newline]).map_err(|_| IoError::format(path, "header is not UTF-8"))?;
    let fields: Vec<&str> = line.split(' ').collect();
    let dims = match fields.as_slice() {
        [magic, w, h] if *magic == IMAGE_MAGIC => w.parse::<usize>().ok().zip(h.parse::<usize>().ok()),
        _ => None,
    };
    let (width, height) = dims.ok_or_else(|| IoError::format(path, format!("expected `{IMAGE_MAGIC} width height`, got `{line}`")))?;
    let payload = &bytes[newline + 1..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| IoError::format(path, "image dimensions overflow"))?;
    if payload.len() != expected {
        return Err(IoError::format(path, format!("expected {expected} payload bytes, got {}", payload.len())));
    }
    let pixels = payload
        .chunks_exact(12)
        .map(|px| {
            let c = |i: usize| f32::from_le_bytes([px[i], px[i + 1], px[i + 2], px[i + 3]]) as f64;
            [c(0), c(4), c(8)]
        })
        .collect();
    RgbImage::new(width, height, pixels).map_err(|e| IoError::format(path, e.to_string()))
}

pub fn encode_image(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("{IMAGE_MAGIC} {} {}\n", image.width(), image.height()).into_bytes();
    for px in image.pixels() {
        for &c in px {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_image(path: &Path) -> Result<RgbImage, IoError> {
    decode_image(&read(path)?, path)
}

pub fn write_image(image: &RgbImage, path: &Path) -> Result<(), IoError> {
    atomic_write(path, &encode_image(image)).map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::Particle;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn metrics_round_trip_and_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&MetricsLog::default(), &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), format!("{METRICS_HEADER}\n"));
        assert_eq!(load_metrics(&p).unwrap(), MetricsLog::default());
        let log = MetricsLog {
            steps: vec![StepRecord {
                step: 0,
                error: 0.1 + 0.2,
                ess: 1234.5678901234567,
                resampled: true,
                rms_dispersion: 1e-300,
                std_x: std::f64::consts::PI,
                std_y: 2.0f64.sqrt(),
                estimate: Point::new(-1.5, 1e20),
                truth: Point::new(3.0, 4.0),
            }],
        };
        write_metrics(&log, &p).unwrap();
        assert_eq!(load_metrics(&p).unwrap(), log);
    }

    #[test]
    fn particle_dump_has_one_row_per_particle() {
        let set = ParticleSet::from_particles((0..7).map(|i| Particle { x: i as f64, y: 0.0, weight: 1.0 / 7.0 }).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_particles(&set, 3, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().nth(1).unwrap().starts_with("3,0,0.0,0.0,"));
    }

    #[test]
    fn pose_log_examples() {
        let path = Path::new("poses.csv");
        let good = format!("{POSE_LOG_HEADER}\n0,0.0,1,2,0.1,0,0,0\n1,,2,3,0.2,1,1,0.1\n2,5.0,3,4,0.3,1,1,0.1\n");
        let recs = parse_pose_log(good.as_bytes(), path).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].timestamp, None);
        let dup = format!("{POSE_LOG_HEADER}\n0,,1,2,0,0,0,0\n1,,1,2,0,0,0,0\n1,,1,2,0,0,0,0\n");
        match parse_pose_log(dup.as_bytes(), path) {
            Err(IoError::Row { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let bad = format!("{POSE_LOG_HEADER}\n0,,1,2,0,0,0,0\n1,,x,2,0,0,0,0\n");
        match parse_pose_log(bad.as_bytes(), path) {
            Err(IoError::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_pose_log(format!("{POSE_LOG_HEADER}\n").as_bytes(), path).unwrap().is_empty());
        assert!(matches!(parse_pose_log(b"a,b\n", path), Err(IoError::Format { .. })));
    }

    #[test]
    fn config_defaults_and_errors() {
        let path = Path::new("c.json");
        let c = parse_config(r#"{"seed": 7, "grid": {"rows": 10, "cols": 12}}"#, path).unwrap();
        assert_eq!(c.particles, 30_000);
        assert_eq!(c.resampling.ess_threshold, 0.98);
        assert_eq!(c.odometry_noise, 0.02);
        assert_eq!(c.heading_noise, 0.01);
        assert_eq!(c.convergence_radius, 60.0);
        assert_eq!(parse_config(&config_to_json(&c), path).unwrap(), c);

        match parse_config(r#"{"seed": 7, "grid": {"rows": 10, "cols": 12, "spacing": -5}}"#, path) {
            Err(IoError::Validation { field, .. }) => assert_eq!(field, "grid.spacing"),
            other => panic!("{other:?}"),
        }
        match parse_config("{\"seed\": 7,\n \"grid\": {\"rows\": 10, \"cols\": 12},\n \"bogus\": 1}", path) {
            Err(IoError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn image_round_trip() {
        let img = RgbImage::new(2, 1, vec![[0.25, 0.5, 0.75], [1.0, 0.0, 0.125]]).unwrap();
        let bytes = encode_image(&img);
        assert!(bytes.starts_with(b"RGB32F 2 1\n"));
        assert_eq!(decode_image(&bytes, Path::new("i")).unwrap(), img);
        assert!(decode_image(&bytes[..bytes.len() - 1], Path::new("i")).is_err());
    }
}
