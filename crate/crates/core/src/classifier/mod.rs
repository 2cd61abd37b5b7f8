//! Nine-class line classifier: stratified splitting, the hashed n-gram
//! baseline model, evaluation, and import of class probabilities produced
//! by external models.

pub mod features;
pub mod metrics;
pub mod model;
pub mod split;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{featurize, FeatureConfig, SparseVector};
pub use metrics::{ClassMetrics, EvalReport};
pub use model::{
    loss_and_gradient, smoothed_target, softmax, train_baseline, train_baseline_with, BaselineModel,
    EvalPoint, LinearParams, ModelError, TrainConfig, TrainOutcome,
};
pub use split::{stratified_split, DatasetSplit, SplitRatios};

use crate::corpus::{LineRecord, LineRef};
use crate::taxonomy::{CategorizedLine, Category, NUM_CATEGORIES};

/// Probabilities over the nine categories, in [`Category::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution(pub [f64; NUM_CATEGORIES]);

impl ClassDistribution {
    pub fn uniform() -> Self {
        Self([1.0 / NUM_CATEGORIES as f64; NUM_CATEGORIES])
    }

    pub fn prob(&self, c: Category) -> f64 {
        self.0[c.index()]
    }

    /// Most likely category; ties go to the lowest class index.
    pub fn argmax(&self) -> Category {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        Category::ALL[best]
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.0.iter().all(|p| p.is_finite() && *p >= 0.0) && (self.sum() - 1.0).abs() <= tol
    }
}

/// Evaluate argmax predictions of `model` on `lines`.
pub fn evaluate(model: &BaselineModel, lines: &[CategorizedLine]) -> EvalReport {
    let pairs: Vec<(usize, usize)> = lines
        .par_iter()
        .map(|l| {
            (
                l.category.index(),
                model.predict_distribution(&l.line.text).argmax().index(),
            )
        })
        .collect();
    EvalReport::from_pairs(model.classes.clone(), pairs)
}

/// Tolerance on the sum of an imported probability row.
pub const EXTERNAL_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: probabilities for {key} sum to {sum}, outside 1 ± 0.001")]
    BadSum {
        path: PathBuf,
        line: usize,
        key: LineRef,
        sum: f64,
    },
    #[error("{path}:{line}: duplicate row for {key}")]
    Duplicate {
        path: PathBuf,
        line: usize,
        key: LineRef,
    },
    #[error("{missing} corpus lines have no external scores; first: {}", .first.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
    Missing { missing: usize, first: Vec<LineRef> },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ExternalScoreRow {
    pub doc_id: String,
    pub line_index: usize,
    pub segment_index: usize,
    pub probs: Vec<f64>,
}

/// Class distributions keyed by line, read from a score file produced by
/// another model.
#[derive(Debug, Clone, Default)]
pub struct ExternalScores {
    rows: HashMap<LineRef, ClassDistribution>,
    source_hash: String,
}

impl ExternalScores {
    /// Parse and validate every row. Rows whose probabilities sum to within
    /// 1e-3 of 1 are renormalized; others are rejected.
    pub fn load(path: &Path) -> Result<Self, ImportError> {
        use std::io::BufRead;
        let io = |source| ImportError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::open(path).map_err(io)?;
        let mut rows = HashMap::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fmt = |message: String| ImportError::Format {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            let row: ExternalScoreRow = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
            if row.probs.len() != NUM_CATEGORIES {
                return Err(fmt(format!("expected 9 probabilities, got {}", row.probs.len())));
            }
            if row.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(fmt("probabilities must be finite and nonnegative".into()));
            }
            let key = LineRef {
                doc_id: row.doc_id,
                line_index: row.line_index,
                segment_index: row.segment_index,
            };
            let sum: f64 = row.probs.iter().sum();
            if (sum - 1.0).abs() > EXTERNAL_SUM_TOLERANCE {
                return Err(ImportError::BadSum {
                    path: path.to_path_buf(),
                    line: line_no,
                    key,
                    sum,
                });
            }
            let mut probs = [0.0; NUM_CATEGORIES];
            for (p, raw) in probs.iter_mut().zip(&row.probs) {
                *p = raw / sum;
            }
            if rows.contains_key(&key) {
                return Err(ImportError::Duplicate {
                    path: path.to_path_buf(),
                    line: line_no,
                    key,
                });
            }
            rows.insert(key, ClassDistribution(probs));
        }
        let source_hash = crate::io::sha256_file(path).map_err(io)?;
        Ok(Self { rows, source_hash })
    }

    pub fn get(&self, key: &LineRef) -> Option<&ClassDistribution> {
        self.rows.get(key)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// Distributions for `lines`, in order. Fails listing up to ten missing keys.
    pub fn distributions_for(&self, lines: &[LineRecord]) -> Result<Vec<ClassDistribution>, ImportError> {
        let mut out = Vec::with_capacity(lines.len());
        let mut missing = Vec::new();
        let mut missing_count = 0;
        let mut seen = HashSet::new();
        for l in lines {
            let key = l.key();
            match self.rows.get(&key) {
                Some(d) => out.push(*d),
                None => {
                    if seen.insert(key.clone()) {
                        missing_count += 1;
                        if missing.len() < 10 {
                            missing.push(key);
                        }
                    }
                }
            }
        }
        if missing_count > 0 {
            return Err(ImportError::Missing {
                missing: missing_count,
                first: missing,
            });
        }
        Ok(out)
    }
}

/// One distribution per corpus line from an external score file.
pub fn import_external_scores(
    path: &Path,
    lines: &[LineRecord],
) -> Result<Vec<ClassDistribution>, ImportError> {
    ExternalScores::load(path)?.distributions_for(lines)
}
