//! Metric-learning losses with analytic gradients, and Fancy PCA colour
//! augmentation.
//!
//! Sign convention: the triplet loss is `log(1 + exp(-alpha (d_pos - d_neg)))`
//! taken verbatim, so it *decreases* as `d_pos` grows. `d_pos` and `d_neg`
//! therefore behave like similarity scores (higher = closer), not distances.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("non-finite loss input: {0}")]
    NonFinite(&'static str),
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

/// `log(1 + e^x)` without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function `1 / (1 + e^-x)`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn finite(v: f64, name: &'static str) -> Result<f64, LossError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite(name))
    }
}

fn positive(v: f64, name: &str) -> Result<(), LossError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(LossError::InvalidParameter(format!("{name} must be > 0, got {v}")))
    }
}

pub fn triplet_loss(d_pos: f64, d_neg: f64, alpha: f64) -> Result<f64, LossError> {
    finite(d_pos, "d_pos")?;
    finite(d_neg, "d_neg")?;
    positive(alpha, "alpha")?;
    Ok(softplus(-alpha * (d_pos - d_neg)))
}

/// `(dL/dd_pos, dL/dd_neg)`.
pub fn triplet_loss_grad(d_pos: f64, d_neg: f64, alpha: f64) -> Result<(f64, f64), LossError> {
    finite(d_pos, "d_pos")?;
    finite(d_neg, "d_neg")?;
    positive(alpha, "alpha")?;
    let s = sigmoid(-alpha * (d_pos - d_neg));
    Ok((-alpha * s, alpha * s))
}

/// Slopes, margins and pair counts of the three-term loss. The defaults
/// (`alpha = 10`, `m = 0`, `N = 1`) are library placeholders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrinomialParams {
    pub alpha_p: f64,
    pub alpha_n: f64,
    pub alpha_semi: f64,
    pub m_p: f64,
    pub m_n: f64,
    pub m_semi: f64,
    pub n_p: f64,
    pub n_n: f64,
    pub n_semi: f64,
}

impl Default for TrinomialParams {
    fn default() -> Self {
        Self { alpha_p: 10.0, alpha_n: 10.0, alpha_semi: 10.0, m_p: 0.0, m_n: 0.0, m_semi: 0.0, n_p: 1.0, n_n: 1.0, n_semi: 1.0 }
    }
}

impl TrinomialParams {
    pub fn validate(&self) -> Result<(), LossError> {
        positive(self.alpha_p, "alpha_p")?;
        positive(self.alpha_n, "alpha_n")?;
        positive(self.alpha_semi, "alpha_semi")?;
        for (v, name) in [(self.m_p, "m_p"), (self.m_n, "m_n"), (self.m_semi, "m_semi")] {
            if !v.is_finite() {
                return Err(LossError::InvalidParameter(format!("{name} must be finite")));
            }
        }
        for (v, name) in [(self.n_p, "n_p"), (self.n_n, "n_n"), (self.n_semi, "n_semi")] {
            if !(v.is_finite() && v >= 1.0) {
                return Err(LossError::InvalidParameter(format!("{name} must be >= 1, got {v}")));
            }
        }
        Ok(())
    }
}

/// Positive and semi-positive terms reward high similarity; the negative
/// term penalizes it. Each term is scaled by `1 / (N alpha)`.
pub fn trinomial_loss(s_p: f64, s_n: f64, s_semi: f64, params: &TrinomialParams) -> Result<f64, LossError> {
    finite(s_p, "s_p")?;
    finite(s_n, "s_n")?;
    finite(s_semi, "s_semi")?;
    params.validate()?;
    let p = &params;
    Ok(softplus(-p.alpha_p * (s_p - p.m_p)) / (p.n_p * p.alpha_p)
        + softplus(p.alpha_n * (s_n - p.m_n)) / (p.n_n * p.alpha_n)
        + softplus(-p.alpha_semi * (s_semi - p.m_semi)) / (p.n_semi * p.alpha_semi))
}

/// `(dL/dS_p, dL/dS_n, dL/dS_semi)`.
pub fn trinomial_loss_grad(s_p: f64, s_n: f64, s_semi: f64, params: &TrinomialParams) -> Result<[f64; 3], LossError> {
    finite(s_p, "s_p")?;
    finite(s_n, "s_n")?;
    finite(s_semi, "s_semi")?;
    params.validate()?;
    let p = &params;
    Ok([
        -sigmoid(-p.alpha_p * (s_p - p.m_p)) / p.n_p,
        sigmoid(p.alpha_n * (s_n - p.m_n)) / p.n_n,
        -sigmoid(-p.alpha_semi * (s_semi - p.m_semi)) / p.n_semi,
    ])
}

/// Interleaved RGB image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self, LossError> {
        if width == 0 || height == 0 {
            return Err(LossError::InvalidImage(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(LossError::InvalidImage(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidImage("pixel intensities must be finite".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    /// Population covariance of the RGB channels.
    pub fn channel_covariance(&self) -> [[f64; 3]; 3] {
        let n = self.pixels.len() as f64;
        let mut mean = [0.0; 3];
        for px in &self.pixels {
            for c in 0..3 {
                mean[c] += px[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = [[0.0; 3]; 3];
        for px in &self.pixels {
            let d = [px[0] - mean[0], px[1] - mean[1], px[2] - mean[2]];
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] += d[i] * d[j];
                }
            }
        }
        for row in &mut cov {
            row.iter_mut().for_each(|v| *v /= n);
        }
        cov
    }
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
/// Eigenvalues are sorted descending; `vectors[k]` belongs to `values[k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricEigen3 {
    pub values: [f64; 3],
    pub vectors: [[f64; 3]; 3],
}

pub fn symmetric_eigen3(m: &[[f64; 3]; 3]) -> SymmetricEigen3 {
    let mut a = *m;
    // v holds eigenvectors as columns
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let scale = a.iter().flatten().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if scale > 0.0 {
        for _sweep in 0..64 {
            let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
            if off.sqrt() <= f64::EPSILON * 1e-3 * scale {
                break;
            }
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..3 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..3 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in &mut v {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| [v[0][i], v[1][i], v[2][i]]);
    SymmetricEigen3 { values, vectors }
}

/// Standard deviation of the per-component draw before `alpha_scale`.
pub const FANCY_PCA_SIGMA: f64 = 0.1;

/// The RGB offset Fancy PCA adds to every pixel, before clamping:
/// `sum_k a_k * lambda_k * e_k` with `a_k ~ N(0, (alpha_scale * 0.1)^2)`
/// drawn in descending-eigenvalue order.
pub fn fancy_pca_shift<R: Rng + ?Sized>(image: &RgbImage, alpha_scale: f64, rng: &mut R) -> Result<[f64; 3], LossError> {
    if !(alpha_scale.is_finite() && alpha_scale >= 0.0) {
        return Err(LossError::InvalidParameter(format!("alpha_scale must be >= 0, got {alpha_scale}")));
    }
    let eig = symmetric_eigen3(&image.channel_covariance());
    let std = alpha_scale * FANCY_PCA_SIGMA;
    let mut shift = [0.0; 3];
    if std == 0.0 {
        return Ok(shift);
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    for k in 0..3 {
        let a = normal.sample(rng);
        for c in 0..3 {
            shift[c] += a * eig.values[k] * eig.vectors[k][c];
        }
    }
    Ok(shift)
}

pub fn fancy_pca_augment<R: Rng + ?Sized>(image: &RgbImage, alpha_scale: f64, rng: &mut R) -> Result<RgbImage, LossError> {
    let shift = fancy_pca_shift(image, alpha_scale, rng)?;
    let pixels = image
        .pixels
        .iter()
        .map(|px| [0, 1, 2].map(|c| (px[c] + shift[c]).clamp(0.0, 1.0)))
        .collect();
    Ok(RgbImage { width: image.width, height: image.height, pixels })
}

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

/// Worst discrepancy between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientReport {
    pub points: usize,
    pub triplet_max_rel_err: f64,
    pub trinomial_max_rel_err: f64,
}

/// Smallest gradient magnitude treated as relative. Below it the difference
/// quotient is dominated by rounding in the loss value (about
/// `eps * |L| / h`), so the error is measured against this floor instead.
pub const GRADIENT_FLOOR: f64 = 1e-3;

/// `|a - f| / max(|a|, |f|, GRADIENT_FLOOR)`.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Compares analytic gradients with central differences at `points` random
/// inputs: similarities in `[-1, 1]`, slopes in `[1, 20]`, margins in
/// `[-0.5, 0.5]`, pair counts in `[1, 50]`.
pub fn check_gradients<R: Rng + ?Sized>(points: usize, rng: &mut R) -> Result<GradientReport, LossError> {
    let mut report = GradientReport { points, triplet_max_rel_err: 0.0, trinomial_max_rel_err: 0.0 };
    for _ in 0..points {
        let (dp, dn) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let alpha = rng.random_range(1.0..=20.0);
        let (gp, gn) = triplet_loss_grad(dp, dn, alpha)?;
        let fp = central(|x| triplet_loss(x, dn, alpha).expect("finite"), dp);
        let fn_ = central(|x| triplet_loss(dp, x, alpha).expect("finite"), dn);
        report.triplet_max_rel_err = report.triplet_max_rel_err.max(gradient_error(gp, fp)).max(gradient_error(gn, fn_));

        let params = TrinomialParams {
            alpha_p: rng.random_range(1.0..=20.0),
            alpha_n: rng.random_range(1.0..=20.0),
            alpha_semi: rng.random_range(1.0..=20.0),
            m_p: rng.random_range(-0.5..=0.5),
            m_n: rng.random_range(-0.5..=0.5),
            m_semi: rng.random_range(-0.5..=0.5),
            n_p: rng.random_range(1.0..=50.0),
            n_n: rng.random_range(1.0..=50.0),
            n_semi: rng.random_range(1.0..=50.0),
        };
        let s = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let g = trinomial_loss_grad(s[0], s[1], s[2], &params)?;
        for k in 0..3 {
            let f = central(
                |x| {
                    let mut v = s;
                    v[k] = x;
                    trinomial_loss(v[0], v[1], v[2], &params).expect("finite")
                },
                s[k],
            );
            report.trinomial_max_rel_err = report.trinomial_max_rel_err.max(gradient_error(g[k], f));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn triplet_examples() {
        for alpha in [0.5, 10.0, 123.0] {
            assert!((triplet_loss(0.3, 0.3, alpha).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!((triplet_loss(0.4, 0.6, 10.0).unwrap() - 2.126928011042972).abs() < 1e-12);
        let tiny = triplet_loss(100.0, 0.0, 10.0).unwrap();
        assert!((0.0..1e-300).contains(&tiny));
        let big = triplet_loss(0.0, 100.0, 10.0).unwrap();
        assert!((big - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn triplet_gradient_examples() {
        let (gp, gn) = triplet_loss_grad(0.5, 0.5, 10.0).unwrap();
        assert_eq!((gp, gn), (-5.0, 5.0));
        let (gp, _) = triplet_loss_grad(0.7, 0.5, 10.0).unwrap();
        assert!((gp + 1.192029220221175).abs() < 1e-9);
    }

    #[test]
    fn trinomial_examples() {
        let p = TrinomialParams { alpha_p: 2.0, alpha_n: 5.0, alpha_semi: 7.0, m_p: 0.3, m_n: -0.2, m_semi: 0.1, n_p: 3.0, n_n: 4.0, n_semi: 2.0 };
        let at_margin = trinomial_loss(p.m_p, p.m_n, p.m_semi, &p).unwrap();
        let expect = std::f64::consts::LN_2 * (1.0 / 6.0 + 1.0 / 20.0 + 1.0 / 14.0);
        assert!((at_margin - expect).abs() < 1e-15);
        let g = trinomial_loss_grad(p.m_p, p.m_n, p.m_semi, &p).unwrap();
        assert_eq!(g, [-1.0 / 6.0, 1.0 / 8.0, -1.0 / 4.0]);

        let d = TrinomialParams::default();
        let v = trinomial_loss(1.0, -1.0, 1.0, &d).unwrap();
        assert!((v - 1.361966976505939e-5).abs() < 1e-18);

        let lo = trinomial_loss(0.2, 0.1, 0.2, &d).unwrap();
        let hi = trinomial_loss(0.2, 0.3, 0.2, &d).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn invalid_inputs() {
        assert_eq!(triplet_loss(f64::NAN, 0.0, 1.0), Err(LossError::NonFinite("d_pos")));
        assert!(triplet_loss(0.0, 0.0, 0.0).is_err());
        assert!(triplet_loss_grad(0.0, f64::INFINITY, 1.0).is_err());
        let bad = TrinomialParams { n_n: 0.5, ..TrinomialParams::default() };
        assert!(trinomial_loss(0.0, 0.0, 0.0, &bad).is_err());
        let bad = TrinomialParams { alpha_semi: -1.0, ..TrinomialParams::default() };
        assert!(trinomial_loss_grad(0.0, 0.0, 0.0, &bad).is_err());
        assert!(RgbImage::new(0, 3, vec![]).is_err());
        assert!(RgbImage::new(1, 2, vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn negative_term_gradient_is_non_negative() {
        let d = TrinomialParams::default();
        for i in -50..=50 {
            let s = i as f64 * 0.1;
            assert!(trinomial_loss_grad(0.0, s, 0.0, &d).unwrap()[1] >= 0.0);
        }
    }

    fn gradient_image(w: usize, h: usize) -> RgbImage {
        let pixels = (0..w * h)
            .map(|i| {
                let t = i as f64 / (w * h) as f64;
                [0.2 + 0.5 * t, 0.3 + 0.2 * (t * 7.0).sin().abs(), 0.8 - 0.6 * t * t]
            })
            .collect();
        RgbImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = RgbImage::new(4, 3, vec![[0.2, 0.5, 0.7]; 12]).unwrap();
        let mut rng = stream(1, Purpose::Augmentation);
        assert_eq!(fancy_pca_augment(&img, 1000.0, &mut rng).unwrap(), img);
    }

    #[test]
    fn zero_scale_is_identity() {
        let img = gradient_image(8, 8);
        let mut rng = stream(1, Purpose::Augmentation);
        assert_eq!(fancy_pca_augment(&img, 0.0, &mut rng).unwrap(), img);
    }

    #[test]
    fn augmentation_preserves_dimensions_and_range() {
        let img = gradient_image(9, 5);
        let mut rng = stream(4, Purpose::Augmentation);
        let out = fancy_pca_augment(&img, 1000.0, &mut rng).unwrap();
        assert_eq!((out.width(), out.height()), (9, 5));
        assert!(out.pixels().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn grayscale_dominant_component_is_diagonal() {
        let pixels = (0..64).map(|i| [(i as f64 / 63.0); 3]).collect();
        let img = RgbImage::new(8, 8, pixels).unwrap();
        let eig = symmetric_eigen3(&img.channel_covariance());
        let e = eig.vectors[0];
        let inv = 1.0 / 3f64.sqrt();
        assert!((e[0].abs() - inv).abs() < 1e-12 && (e[1].abs() - inv).abs() < 1e-12);
        let mut rng = stream(8, Purpose::Augmentation);
        for _ in 0..100 {
            let s = fancy_pca_shift(&img, 1000.0, &mut rng).unwrap();
            let spread = s.iter().cloned().fold(f64::MIN, f64::max) - s.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 1e-9, "shift {s:?}");
        }
    }

    #[test]
    fn eigen_of_diagonal_and_known_matrix() {
        let d = symmetric_eigen3(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(d.values, [3.0, 2.0, 1.0]);
        let m = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        let e = symmetric_eigen3(&m);
        for (got, want) in e.values.iter().zip([5.0, 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let zero = symmetric_eigen3(&[[0.0; 3]; 3]);
        assert_eq!(zero.values, [0.0; 3]);
    }
}
