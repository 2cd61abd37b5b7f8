//! Multinomial logistic regression over hashed n-gram features, trained
//! with mini-batch gradient descent on label-smoothed cross-entropy.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::{featurize, FeatureConfig, SparseVector};
use super::split::DatasetSplit;
use super::ClassDistribution;
use crate::io::{sha256_hex, write_atomic, write_json_atomic};
use crate::taxonomy::{Category, NUM_CATEGORIES};

pub const MODEL_FORMAT: &str = "linequal-baseline";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const HEADER_FILE: &str = "model.json";
const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("non-finite loss {loss} at epoch {epoch} step {step} (learning rate {learning_rate})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        learning_rate: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainingSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without dev-loss improvement before stopping.
    pub patience: usize,
    pub label_smoothing: f64,
    /// Optimizer steps between dev evaluations.
    pub eval_interval: usize,
    pub seed: u64,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 16,
            max_epochs: 5,
            patience: 5,
            label_smoothing: 0.1,
            eval_interval: 100,
            seed: 42,
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.eval_interval == 0 {
            return bad("batch_size, max_epochs, patience and eval_interval must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if self.features.dim == 0 || self.features.ngram_min == 0 || self.features.ngram_min > self.features.ngram_max {
            return bad("invalid feature configuration");
        }
        Ok(())
    }
}

/// Smoothed one-hot target: `1 - eps + eps/k` on the true class, `eps/k`
/// elsewhere.
pub fn smoothed_target(class: usize, k: usize, eps: f64) -> Vec<f64> {
    let off = eps / k as f64;
    let mut t = vec![off; k];
    t[class] = 1.0 - eps + off;
    t
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Dense weights `[feature][class]` and per-class bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub num_classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            weights: vec![0.0; dim * num_classes],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len() / self.num_classes
    }

    pub fn logits(&self, x: &SparseVector) -> Vec<f64> {
        let k = self.num_classes;
        let mut z = self.bias.clone();
        for (f, v) in x.iter() {
            let row = &self.weights[f * k..(f + 1) * k];
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += v * w;
            }
        }
        z
    }
}

/// Gradient of the mean batch loss; weight rows only for touched features.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: BTreeMap<usize, Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Mean label-smoothed cross-entropy over `batch` and its gradient.
pub fn loss_and_gradient(
    params: &LinearParams,
    batch: &[(&SparseVector, usize)],
    label_smoothing: f64,
) -> (f64, Gradient) {
    let k = params.num_classes;
    let n = batch.len() as f64;
    let mut grad = Gradient {
        weights: BTreeMap::new(),
        bias: vec![0.0; k],
    };
    let mut loss = 0.0;
    for (x, class) in batch {
        let z = params.logits(x);
        let logp = log_softmax(&z);
        let target = smoothed_target(*class, k, label_smoothing);
        loss -= target.iter().zip(&logp).map(|(t, lp)| t * lp).sum::<f64>();
        // d loss / d z = softmax(z) - target
        let delta: Vec<f64> = logp.iter().zip(&target).map(|(lp, t)| lp.exp() - t).collect();
        for (b, d) in grad.bias.iter_mut().zip(&delta) {
            *b += d / n;
        }
        for (f, v) in x.iter() {
            let row = grad.weights.entry(f).or_insert_with(|| vec![0.0; k]);
            for (g, d) in row.iter_mut().zip(&delta) {
                *g += v * d / n;
            }
        }
    }
    (loss / n, grad)
}

pub fn mean_loss(params: &LinearParams, data: &[(&SparseVector, usize)], label_smoothing: f64) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let k = params.num_classes;
    // collected first so the summation order is fixed
    let losses: Vec<f64> = data
        .par_iter()
        .map(|(x, class)| {
            let logp = log_softmax(&params.logits(x));
            let target = smoothed_target(*class, k, label_smoothing);
            -target.iter().zip(&logp).map(|(t, lp)| t * lp).sum::<f64>()
        })
        .collect();
    losses.iter().sum::<f64>() / data.len() as f64
}

/// Trained line-quality classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub features: FeatureConfig,
    pub classes: Vec<String>,
    pub params: LinearParams,
}

impl BaselineModel {
    /// All-zero model over the nine categories.
    pub fn zeros(features: FeatureConfig) -> Self {
        Self {
            features,
            classes: Category::ALL.iter().map(|c| c.name().to_string()).collect(),
            params: LinearParams::zeros(features.dim, NUM_CATEGORIES),
        }
    }

    pub fn predict_distribution(&self, text: &str) -> ClassDistribution {
        let x = featurize(text, &self.features);
        self.predict_features(&x)
    }

    pub fn predict_features(&self, x: &SparseVector) -> ClassDistribution {
        let p = softmax(&self.params.logits(x));
        let mut probs = [0.0; NUM_CATEGORIES];
        probs.copy_from_slice(&p);
        ClassDistribution(probs)
    }

    pub fn predict_class(&self, text: &str) -> Category {
        self.predict_distribution(text).argmax()
    }

    fn header(&self, weights_sha256: String) -> ModelHeader {
        ModelHeader {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            features: self.features,
            classes: self.classes.clone(),
            weights_file: WEIGHTS_FILE.to_string(),
            weights_dtype: "f64le".to_string(),
            weights_layout: "feature-major [dim][classes]".to_string(),
            weights_sha256,
            bias: self.params.bias.clone(),
            train_config: None,
        }
    }

    fn weight_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.params.weights.len() * 8);
        for w in &self.params.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        buf
    }

    /// Write `model.json` (header) and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path, train_config: Option<&TrainConfig>) -> Result<(), ModelError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ModelError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let bytes = self.weight_bytes();
        let mut header = self.header(sha256_hex(&bytes));
        header.train_config = train_config.copied();
        let wpath = dir.join(WEIGHTS_FILE);
        write_atomic(&wpath, &bytes).map_err(io(&wpath))?;
        let hpath = dir.join(HEADER_FILE);
        write_json_atomic(&hpath, &header).map_err(io(&hpath))
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let hpath = dir.join(HEADER_FILE);
        let format_err = |path: &Path, message: String| ModelError::Format {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(&hpath).map_err(|source| ModelError::Io {
            path: hpath.clone(),
            source,
        })?;
        let header: ModelHeader =
            serde_json::from_str(&text).map_err(|e| format_err(&hpath, e.to_string()))?;
        if header.format != MODEL_FORMAT || header.version != MODEL_FORMAT_VERSION {
            return Err(format_err(
                &hpath,
                format!("unsupported model format {} v{}", header.format, header.version),
            ));
        }
        let expected: Vec<&str> = Category::ALL.iter().map(|c| c.name()).collect();
        if header.classes != expected {
            return Err(format_err(&hpath, "class list does not match the 9 categories".into()));
        }
        if header.bias.len() != NUM_CATEGORIES {
            return Err(format_err(&hpath, "bias must have 9 entries".into()));
        }
        let wpath = dir.join(&header.weights_file);
        let bytes = fs::read(&wpath).map_err(|source| ModelError::Io {
            path: wpath.clone(),
            source,
        })?;
        if sha256_hex(&bytes) != header.weights_sha256 {
            return Err(format_err(&wpath, "weights checksum mismatch".into()));
        }
        if bytes.len() != header.features.dim * NUM_CATEGORIES * 8 {
            return Err(format_err(&wpath, "weights size does not match header".into()));
        }
        let weights: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if weights.iter().chain(&header.bias).any(|w| !w.is_finite()) {
            return Err(format_err(&wpath, "non-finite weight".into()));
        }
        Ok(Self {
            features: header.features,
            classes: header.classes,
            params: LinearParams {
                num_classes: NUM_CATEGORIES,
                weights,
                bias: header.bias,
            },
        })
    }

    /// Hash identifying this model's parameters.
    pub fn fingerprint(&self) -> String {
        let mut data = self.weight_bytes();
        for b in &self.params.bias {
            data.extend_from_slice(&b.to_le_bytes());
        }
        data.extend_from_slice(
            serde_json::to_string(&self.features)
                .expect("feature config serializes")
                .as_bytes(),
        );
        sha256_hex(&data)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    features: FeatureConfig,
    classes: Vec<String>,
    weights_file: String,
    weights_dtype: String,
    weights_layout: String,
    weights_sha256: String,
    bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalPoint {
    pub index: usize,
    pub epoch: usize,
    pub step: usize,
    pub dev_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BaselineModel,
    pub history: Vec<EvalPoint>,
    pub best: Option<EvalPoint>,
    pub stopped_early: bool,
    pub steps: usize,
}

fn featurize_all(
    lines: &[crate::taxonomy::CategorizedLine],
    cfg: &FeatureConfig,
) -> Vec<(SparseVector, usize)> {
    lines
        .par_iter()
        .map(|l| (featurize(&l.line.text, cfg), l.category.index()))
        .collect()
}

/// Train on `split.train`, evaluating on `split.dev` every
/// `eval_interval` steps, and return the best-dev-loss parameters.
pub fn train_baseline(split: &DatasetSplit, cfg: &TrainConfig) -> Result<BaselineModel, ModelError> {
    Ok(train_baseline_with(split, cfg, |p| p.dev_loss)?.model)
}

/// As [`train_baseline`], passing every dev evaluation through `observe`,
/// which returns the loss used for early stopping.
pub fn train_baseline_with<F>(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<TrainOutcome, ModelError>
where
    F: FnMut(EvalPoint) -> f64,
{
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let train = featurize_all(&split.train, &cfg.features);
    let dev = featurize_all(&split.dev, &cfg.features);
    let dev_refs: Vec<(&SparseVector, usize)> = dev.iter().map(|(x, c)| (x, *c)).collect();
    if dev.is_empty() {
        log::warn!("dev split is empty; early stopping disabled");
    }

    let mut model = BaselineModel::zeros(cfg.features);
    let k = NUM_CATEGORIES;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(EvalPoint, f64, LinearParams)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    let mut stopped_early = false;

    let mut evaluate = |epoch: usize,
                        step: usize,
                        params: &LinearParams,
                        history: &mut Vec<EvalPoint>,
                        best: &mut Option<(EvalPoint, f64, LinearParams)>,
                        since_best: &mut usize|
     -> Result<bool, ModelError> {
        if dev_refs.is_empty() {
            return Ok(false);
        }
        let point = EvalPoint {
            index: history.len(),
            epoch,
            step,
            dev_loss: mean_loss(params, &dev_refs, cfg.label_smoothing),
        };
        if !point.dev_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                epoch,
                step,
                loss: point.dev_loss,
                learning_rate: cfg.learning_rate,
            });
        }
        let loss = observe(point);
        let recorded = EvalPoint {
            dev_loss: loss,
            ..point
        };
        history.push(recorded);
        match best {
            Some((_, best_loss, _)) if loss >= *best_loss => {
                *since_best += 1;
            }
            _ => {
                *best = Some((recorded, loss, params.clone()));
                *since_best = 0;
            }
        }
        Ok(*since_best >= cfg.patience)
    };

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&SparseVector, usize)> =
                chunk.iter().map(|&i| (&train[i].0, train[i].1)).collect();
            let (loss, grad) = loss_and_gradient(&model.params, &batch, cfg.label_smoothing);
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    step,
                    loss,
                    learning_rate: cfg.learning_rate,
                });
            }
            let lr = cfg.learning_rate;
            for (b, g) in model.params.bias.iter_mut().zip(&grad.bias) {
                *b -= lr * g;
            }
            for (f, row) in grad.weights {
                for (w, g) in model.params.weights[f * k..(f + 1) * k].iter_mut().zip(row) {
                    *w -= lr * g;
                }
            }
            step += 1;
            if step.is_multiple_of(cfg.eval_interval)
                && evaluate(epoch, step, &model.params, &mut history, &mut best, &mut since_best)?
            {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    if !stopped_early && !step.is_multiple_of(cfg.eval_interval) {
        let epoch = cfg.max_epochs - 1;
        evaluate(epoch, step, &model.params, &mut history, &mut best, &mut since_best)?;
    }
    let best_point = best.as_ref().map(|(p, _, _)| *p);
    if let Some((_, _, params)) = best {
        model.params = params;
    }
    Ok(TrainOutcome {
        model,
        history,
        best: best_point,
        stopped_early,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_targets() {
        let t = smoothed_target(0, 9, 0.1);
        assert!((t[0] - (0.9 + 0.1 / 9.0)).abs() < 1e-15);
        assert!((t[0] - 0.911_111_111_111).abs() < 1e-9);
        assert!((t[3] - 0.011_111_111_111).abs() < 1e-9);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = BaselineModel::zeros(FeatureConfig {
            dim: 64,
            ..FeatureConfig::default()
        });
        let d = m.predict_distribution("anything at all");
        for p in d.0 {
            assert!((p - 1.0 / 9.0).abs() < 1e-15);
        }
        assert_eq!(d.argmax(), Category::Clean);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BaselineModel::zeros(FeatureConfig {
            dim: 32,
            ..FeatureConfig::default()
        });
        for (i, w) in m.params.weights.iter_mut().enumerate() {
            *w = (i as f64).sin();
        }
        m.params.bias[2] = 0.25;
        m.save(dir.path(), Some(&TrainConfig::default())).unwrap();
        let back = BaselineModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint(), m.fingerprint());

        fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 16]).unwrap();
        assert!(matches!(BaselineModel::load(dir.path()), Err(ModelError::Format { .. })));
    }
}
