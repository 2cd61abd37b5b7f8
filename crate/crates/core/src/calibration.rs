//! Platt scaling of the Clean-class probability.
//!
//! The raw score of a line is the probability mass the classifier puts on
//! Clean. A logistic map `p = 1 / (1 + exp(-(a*s + b)))` fitted on held-out
//! data turns it into a calibrated quality score.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::ClassDistribution;
use crate::io::{sha256_hex, write_json_atomic};
use crate::taxonomy::Category;

pub const MIN_FIT_POINTS: usize = 10;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 100;
const MIN_STEP: f64 = 1e-10;
const HESSIAN_RIDGE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("need at least {MIN_FIT_POINTS} points to fit, got {0}")]
    TooFewPoints(usize),
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {0} at index {1} is not finite")]
    NonFiniteScore(f64, usize),
    #[error(
        "Platt fit did not converge after {iterations} iterations: \
         a={a} b={b} objective={objective} gradient norm={gradient_norm}"
    )]
    NoConvergence {
        iterations: usize,
        a: f64,
        b: f64,
        objective: f64,
        gradient_norm: f64,
    },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: f64,
    pub b: f64,
}

impl PlattParams {
    pub const IDENTITY_LOGIT: PlattParams = PlattParams { a: 1.0, b: 0.0 };

    pub fn apply(&self, s: f64) -> f64 {
        apply_platt(self, s)
    }

    /// Raw score at which the calibrated probability equals `p`, for a != 0.
    pub fn inverse(&self, p: f64) -> Option<f64> {
        if self.a == 0.0 || !(0.0..1.0).contains(&p) || p == 0.0 {
            return None;
        }
        Some(((p / (1.0 - p)).ln() - self.b) / self.a)
    }
}

/// Fitted parameters together with provenance, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlattFile {
    pub a: f64,
    pub b: f64,
    /// SHA-256 of the data the parameters were fitted on.
    pub fitted_on: String,
    pub n: usize,
}

impl PlattFile {
    pub fn params(&self) -> PlattParams {
        PlattParams { a: self.a, b: self.b }
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let err = |message: String| CalibrationError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: PlattFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if !file.a.is_finite() || !file.b.is_finite() {
            return Err(err("parameters must be finite".into()));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        write_json_atomic(path, self).map_err(|e| CalibrationError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Hash of the parameter values.
    pub fn fingerprint(&self) -> String {
        let mut data = Vec::new();
        data.extend_from_slice(&self.a.to_le_bytes());
        data.extend_from_slice(&self.b.to_le_bytes());
        sha256_hex(&data)
    }
}

/// Probability mass on Clean.
pub fn clean_probability(dist: &ClassDistribution) -> f64 {
    dist.prob(Category::Clean)
}

/// Logistic map `1 / (1 + exp(-(a*s + b)))`, kept strictly inside (0, 1).
pub fn apply_platt(params: &PlattParams, s: f64) -> f64 {
    let f = params.a * s + params.b;
    let p = if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean negative log-likelihood of smoothed targets under `(a, b)`.
pub fn platt_objective(scores: &[f64], targets: &[f64], a: f64, b: f64) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(targets)
        .map(|(s, t)| {
            let f = a * s + b;
            softplus(f) - t * f
        })
        .sum();
    total / scores.len() as f64
}

/// Platt's out-of-sample targets: `(N+ + 1)/(N+ + 2)` for positives and
/// `1/(N- + 2)` for negatives.
pub fn platt_targets(labels: &[bool]) -> Vec<f64> {
    let pos = labels.iter().filter(|l| **l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let hi = (pos + 1.0) / (pos + 2.0);
    let lo = 1.0 / (neg + 2.0);
    labels.iter().map(|&l| if l { hi } else { lo }).collect()
}

fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// Fit `(a, b)` by Newton's method with backtracking line search on the
/// smoothed-target log-likelihood, until the gradient norm of the mean
/// objective drops below [`GRADIENT_TOLERANCE`].
pub fn fit_platt(scores: &[f64], labels: &[bool]) -> Result<PlattParams, CalibrationError> {
    if scores.len() != labels.len() {
        return Err(CalibrationError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.len() < MIN_FIT_POINTS {
        return Err(CalibrationError::TooFewPoints(scores.len()));
    }
    if let Some((i, s)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(CalibrationError::NonFiniteScore(*s, i));
    }
    let targets = platt_targets(labels);
    let n = scores.len() as f64;
    let prior = targets.iter().sum::<f64>() / n;
    let (mut a, mut b) = (0.0, (prior / (1.0 - prior)).ln());
    let mut obj = platt_objective(scores, &targets, a, b);

    let gradient_and_hessian = |a: f64, b: f64| {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (s, t) in scores.iter().zip(&targets) {
            let p = sigmoid(a * s + b);
            let d = p - t;
            let w = p * (1.0 - p);
            ga += d * s;
            gb += d;
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        ([ga / n, gb / n], [haa / n + HESSIAN_RIDGE, hab / n, hbb / n + HESSIAN_RIDGE])
    };

    for iteration in 0..MAX_ITERATIONS {
        let (g, h) = gradient_and_hessian(a, b);
        let gnorm = g[0].hypot(g[1]);
        if gnorm < GRADIENT_TOLERANCE {
            log::debug!("Platt fit converged in {iteration} iterations: a={a} b={b}");
            return Ok(PlattParams { a, b });
        }
        let det = h[0] * h[2] - h[1] * h[1];
        let da = -(h[2] * g[0] - h[1] * g[1]) / det;
        let db = -(h[0] * g[1] - h[1] * g[0]) / det;
        let slope = g[0] * da + g[1] * db;
        let mut step = 1.0;
        loop {
            let (na, nb) = (a + step * da, b + step * db);
            let nobj = platt_objective(scores, &targets, na, nb);
            if nobj <= obj + 1e-4 * step * slope {
                a = na;
                b = nb;
                obj = nobj;
                break;
            }
            step /= 2.0;
            if step < MIN_STEP {
                return Err(CalibrationError::NoConvergence {
                    iterations: iteration + 1,
                    a,
                    b,
                    objective: obj,
                    gradient_norm: gnorm,
                });
            }
        }
    }
    let (g, _) = gradient_and_hessian(a, b);
    let gradient_norm = g[0].hypot(g[1]);
    if gradient_norm < GRADIENT_TOLERANCE {
        return Ok(PlattParams { a, b });
    }
    Err(CalibrationError::NoConvergence {
        iterations: MAX_ITERATIONS,
        a,
        b,
        objective: obj,
        gradient_norm,
    })
}

/// Fit on `(distribution, is_clean)` pairs and record a hash of the data.
pub fn fit_on_distributions(
    data: &[(ClassDistribution, bool)],
) -> Result<PlattFile, CalibrationError> {
    let scores: Vec<f64> = data.iter().map(|(d, _)| clean_probability(d)).collect();
    let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
    let params = fit_platt(&scores, &labels)?;
    let mut bytes = Vec::with_capacity(data.len() * 9);
    for (s, l) in scores.iter().zip(&labels) {
        bytes.extend_from_slice(&s.to_le_bytes());
        bytes.push(u8::from(*l));
    }
    Ok(PlattFile {
        a: params.a,
        b: params.b,
        fitted_on: sha256_hex(&bytes),
        n: data.len(),
    })
}
