//! Sharded scoring of a corpus, threshold filtering and reduction
//! accounting.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::calibration::{apply_platt, clean_probability, PlattFile, PlattParams};
use crate::classifier::{BaselineModel, ClassDistribution, ExternalScores, ImportError};
use crate::corpus::{split_into_lines, CorpusError, Document, LineRecord, LineSplitter};
use crate::io::{read_json, write_atomic, write_json_atomic};

pub const DEFAULT_SHARD_SIZE: usize = 100_000;
pub const DEFAULT_SCORE_BATCH: usize = 128;
pub const HISTOGRAM_BINS: usize = 10;
pub const MANIFEST_FILE: &str = "manifest.json";

const SCALE: u32 = 10_000;

/// Calibrated Clean probability rounded to four decimal places, stored as
/// an integer number of ten-thousandths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct QualityScore(u16);

impl QualityScore {
    pub const MAX: QualityScore = QualityScore(SCALE as u16);

    /// Round a probability in [0, 1] to four decimals.
    pub fn from_probability(p: f64) -> Self {
        let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        QualityScore((p * SCALE as f64).round() as u16)
    }

    pub fn from_ten_thousandths(v: u16) -> Option<Self> {
        (u32::from(v) <= SCALE).then_some(QualityScore(v))
    }

    pub fn ten_thousandths(self) -> u16 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / SCALE as f64
    }

    /// Whether this score falls strictly below `threshold`.
    pub fn below(self, threshold: f64) -> bool {
        self.value() < threshold
    }

    /// Histogram bin in `[i/bins, (i+1)/bins)`, with 1.0 in the last bin.
    pub fn bin(self, bins: usize) -> usize {
        ((u64::from(self.0) * bins as u64) / u64::from(SCALE)).min(bins as u64 - 1) as usize
    }
}

impl fmt::Display for QualityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:04}", self.0 / SCALE as u16, self.0 % SCALE as u16)
    }
}

impl Serialize for QualityScore {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(self.to_string())
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for QualityScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(serde::de::Error::custom(format!(
                "quality_score {v} outside [0, 1]"
            )));
        }
        Ok(QualityScore::from_probability(v))
    }
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    External(#[from] ImportError),
    #[error("scorer returned {got} distributions for {expected} lines")]
    Count { expected: usize, got: usize },
    #[error("{0}")]
    Other(String),
}

/// Produces class distributions for batches of lines.
pub trait LineScorer: Sync {
    fn distributions(&self, lines: &[&LineRecord]) -> Result<Vec<ClassDistribution>, ScoreError>;

    /// Hash identifying the scorer's parameters.
    fn fingerprint(&self) -> String;
}

impl LineScorer for BaselineModel {
    fn distributions(&self, lines: &[&LineRecord]) -> Result<Vec<ClassDistribution>, ScoreError> {
        Ok(lines.iter().map(|l| self.predict_distribution(&l.text)).collect())
    }

    fn fingerprint(&self) -> String {
        BaselineModel::fingerprint(self)
    }
}

impl LineScorer for ExternalScores {
    fn distributions(&self, lines: &[&LineRecord]) -> Result<Vec<ClassDistribution>, ScoreError> {
        let owned: Vec<LineRecord> = lines.iter().map(|l| (*l).clone()).collect();
        Ok(self.distributions_for(&owned)?)
    }

    fn fingerprint(&self) -> String {
        self.source_hash().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub shard_size: usize,
    pub batch_size: usize,
    pub length_grouping: bool,
    /// Shards scored concurrently.
    pub workers: usize,
}

impl Default for ShardPlan {
    fn default() -> Self {
        Self {
            shard_size: DEFAULT_SHARD_SIZE,
            batch_size: DEFAULT_SCORE_BATCH,
            length_grouping: true,
            workers: 1,
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredLine {
    pub line_index: usize,
    pub segment_index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub follows_space: bool,
    pub quality_score: QualityScore,
}

/// A document with one score per line record. `quality_score` repeats the
/// per-line scores as a flat array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub id: String,
    pub text: String,
    #[serde(flatten)]
    pub meta: Map<String, Value>,
    pub lines: Vec<ScoredLine>,
    pub quality_score: Vec<QualityScore>,
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("shard {shard}: {source}")]
    Score {
        shard: usize,
        #[source]
        source: ScoreError,
    },
    #[error("{} shard(s) failed: {}", .0.len(), .0.iter().map(|(i, e)| format!("{i}: {e}")).collect::<Vec<_>>().join("; "))]
    ShardsFailed(Vec<(usize, String)>),
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("invalid shard plan: {0}")]
    Plan(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FilterError + '_ {
    move |source| FilterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Score every line of `docs`: the Clean probability, Platt-scaled when
/// `platt` is given. Lines are scored in batches of
/// `plan.batch_size`, sorted by character length when length grouping is
/// on; output keeps document order.
pub fn score_documents<S: LineScorer + ?Sized>(
    docs: &[Document],
    splitter: &LineSplitter,
    scorer: &S,
    platt: Option<&PlattParams>,
    plan: &ShardPlan,
) -> Result<Vec<ScoredDocument>, ScoreError> {
    let per_doc: Vec<Vec<LineRecord>> = docs.iter().map(|d| splitter.split(d)).collect();
    let flat: Vec<&LineRecord> = per_doc.iter().flatten().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    if plan.length_grouping {
        order.sort_by_key(|&i| flat[i].text.chars().count());
    }
    let mut scores = vec![QualityScore::default(); flat.len()];
    for chunk in order.chunks(plan.batch_size.max(1)) {
        let batch: Vec<&LineRecord> = chunk.iter().map(|&i| flat[i]).collect();
        let dists = scorer.distributions(&batch)?;
        if dists.len() != batch.len() {
            return Err(ScoreError::Count {
                expected: batch.len(),
                got: dists.len(),
            });
        }
        for (&i, d) in chunk.iter().zip(&dists) {
            let p = clean_probability(d);
            scores[i] = QualityScore::from_probability(platt.map_or(p, |pl| apply_platt(pl, p)));
        }
    }
    let mut next = 0;
    Ok(docs
        .iter()
        .zip(per_doc)
        .map(|(doc, lines)| {
            let lines: Vec<ScoredLine> = lines
                .into_iter()
                .map(|l| {
                    let q = scores[next];
                    next += 1;
                    ScoredLine {
                        line_index: l.line_index,
                        segment_index: l.segment_index,
                        text: l.text,
                        follows_space: l.follows_space,
                        quality_score: q,
                    }
                })
                .collect();
            ScoredDocument {
                id: doc.id.clone(),
                text: doc.text.clone(),
                meta: doc.meta.clone(),
                quality_score: lines.iter().map(|l| l.quality_score).collect(),
                lines,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub index: usize,
    pub file: String,
    pub documents: usize,
    pub lines: usize,
    pub status: ShardStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub shards: Vec<ShardEntry>,
    pub documents: usize,
    pub lines: usize,
    pub scorer: String,
    pub platt: String,
    pub plan: ShardPlan,
}

pub fn shard_file_name(index: usize) -> String {
    format!("shard-{index:05}.jsonl")
}

fn failed_marker(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("shard-{index:05}.failed"))
}

fn encode_docs<T: Serialize>(docs: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for d in docs {
        serde_json::to_writer(&mut buf, d).expect("documents serialize");
        buf.push(b'\n');
    }
    buf
}

/// Read all documents of a scored shard file.
pub fn read_scored_shard(path: &Path) -> Result<Vec<ScoredDocument>, FilterError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FilterError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Score a document stream into `out_dir`, one file per `shard_size`
/// documents. Existing shard files are kept, so an interrupted run resumes
/// where it stopped. A shard whose scoring fails leaves a `.failed` marker
/// and does not stop the others; the manifest is written only when every
/// shard succeeded.
pub fn score_corpus<I, S>(
    docs: I,
    splitter: &LineSplitter,
    scorer: &S,
    platt: Option<&PlattFile>,
    plan: &ShardPlan,
    out_dir: &Path,
) -> Result<Manifest, FilterError>
where
    I: IntoIterator<Item = Result<Document, CorpusError>>,
    S: LineScorer + ?Sized,
{
    if plan.shard_size == 0 || plan.batch_size == 0 || plan.workers == 0 {
        return Err(FilterError::Plan(
            "shard_size, batch_size and workers must be at least 1".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let params = platt.map(PlattFile::params);
    let mut docs = docs.into_iter().peekable();
    let mut entries: Vec<ShardEntry> = Vec::new();
    let mut failures: Vec<(usize, String)> = Vec::new();
    let mut next_index = 0usize;

    while docs.peek().is_some() {
        let mut group: Vec<(usize, Vec<Document>)> = Vec::with_capacity(plan.workers);
        for _ in 0..plan.workers {
            let mut shard = Vec::with_capacity(plan.shard_size.min(1 << 16));
            for doc in docs.by_ref().take(plan.shard_size) {
                shard.push(doc?);
            }
            if shard.is_empty() {
                break;
            }
            group.push((next_index, shard));
            next_index += 1;
        }
        let results: Vec<Result<ShardEntry, (usize, String)>> = group
            .into_par_iter()
            .map(|(index, shard)| {
                let name = shard_file_name(index);
                let path = out_dir.join(&name);
                if path.exists() {
                    let existing = read_scored_shard(&path).map_err(|e| (index, e.to_string()))?;
                    if existing.len() == shard.len() {
                        log::info!("{name}: already scored, skipping");
                        return Ok(ShardEntry {
                            index,
                            file: name,
                            documents: existing.len(),
                            lines: existing.iter().map(|d| d.lines.len()).sum(),
                            status: ShardStatus::Done,
                        });
                    }
                }
                let scored = score_documents(&shard, splitter, scorer, params.as_ref(), plan).map_err(|e| {
                    let msg = e.to_string();
                    let _ = write_atomic(&failed_marker(out_dir, index), msg.as_bytes());
                    (index, msg)
                })?;
                write_atomic(&path, &encode_docs(&scored)).map_err(|e| (index, e.to_string()))?;
                let _ = fs::remove_file(failed_marker(out_dir, index));
                Ok(ShardEntry {
                    index,
                    file: name,
                    documents: scored.len(),
                    lines: scored.iter().map(|d| d.lines.len()).sum(),
                    status: ShardStatus::Done,
                })
            })
            .collect();
        for r in results {
            match r {
                Ok(e) => entries.push(e),
                Err((index, msg)) => {
                    log::error!("shard {index} failed: {msg}");
                    failures.push((index, msg));
                }
            }
        }
    }
    if !failures.is_empty() {
        return Err(FilterError::ShardsFailed(failures));
    }
    let manifest = Manifest {
        documents: entries.iter().map(|e| e.documents).sum(),
        lines: entries.iter().map(|e| e.lines).sum(),
        shards: entries,
        scorer: scorer.fingerprint(),
        platt: platt.map_or_else(|| "none".to_string(), PlattFile::fingerprint),
        plan: *plan,
    };
    let path = out_dir.join(MANIFEST_FILE);
    write_json_atomic(&path, &manifest).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, FilterError> {
    let path = dir.join(MANIFEST_FILE);
    read_json(&path).map_err(|e| FilterError::Format {
        path,
        message: e.to_string(),
    })
}

/// Counts of `scores` per bin of width `1/bins`; 1.0 lands in the last bin.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<u64> {
    assert!(bins >= 1, "need at least one bin");
    let mut out = vec![0u64; bins];
    for s in scores {
        let i = ((s * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        out[i] += 1;
    }
    out
}

/// Counts tokens of a text for reduction accounting.
pub trait TokenCounter: Sync {
    fn count(&self, text: &str) -> u64;
}

/// Whitespace-delimited words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceWords;

impl TokenCounter for WhitespaceWords {
    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub threshold: f64,
    pub lines_total: u64,
    pub lines_removed: u64,
    pub docs_total: u64,
    pub docs_dropped: u64,
    pub words_total: u64,
    pub words_removed: u64,
    pub chars_total: u64,
    pub chars_removed: u64,
    pub histogram: Vec<u64>,
}

impl FilterStats {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            lines_total: 0,
            lines_removed: 0,
            docs_total: 0,
            docs_dropped: 0,
            words_total: 0,
            words_removed: 0,
            chars_total: 0,
            chars_removed: 0,
            histogram: vec![0; HISTOGRAM_BINS],
        }
    }

    fn merge(&mut self, other: &FilterStats) {
        self.lines_total += other.lines_total;
        self.lines_removed += other.lines_removed;
        self.docs_total += other.docs_total;
        self.docs_dropped += other.docs_dropped;
        self.words_total += other.words_total;
        self.words_removed += other.words_removed;
        self.chars_total += other.chars_total;
        self.chars_removed += other.chars_removed;
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
    }

    /// Reduction of the filtered output relative to the scored input.
    pub fn reduction(&self) -> ReductionReport {
        let original = CorpusTotals {
            documents: self.docs_total,
            lines: self.lines_total,
            words: self.words_total,
            chars: self.chars_total,
        };
        let filtered = CorpusTotals {
            documents: self.docs_total - self.docs_dropped,
            lines: self.lines_total - self.lines_removed,
            words: self.words_total - self.words_removed,
            chars: self.chars_total - self.chars_removed,
        };
        reduction_report(&original, &filtered)
    }

    pub fn line_reduction(&self) -> f64 {
        pct(self.lines_removed, self.lines_total)
    }

    pub fn word_reduction(&self) -> f64 {
        pct(self.words_removed, self.words_total)
    }

    pub fn doc_reduction(&self) -> f64 {
        pct(self.docs_dropped, self.docs_total)
    }

    pub fn char_reduction(&self) -> f64 {
        pct(self.chars_removed, self.chars_total)
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "threshold {:.2}: removed {} of {} lines ({:.2}%), {} of {} words ({:.2}%), \
             {} of {} chars ({:.2}%); dropped {} of {} documents ({:.2}%)\n",
            self.threshold,
            self.lines_removed,
            self.lines_total,
            self.line_reduction(),
            self.words_removed,
            self.words_total,
            self.word_reduction(),
            self.chars_removed,
            self.chars_total,
            self.char_reduction(),
            self.docs_dropped,
            self.docs_total,
            self.doc_reduction(),
        );
        out.push_str(&histogram_table(&self.histogram));
        out
    }
}

fn pct(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * part as f64 / total as f64
    }
}

/// Bin ranges with counts and a log-scaled bar.
pub fn histogram_table(counts: &[u64]) -> String {
    let bins = counts.len();
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut out = String::new();
    for (i, c) in counts.iter().enumerate() {
        let bar = if *c == 0 || max == 0 {
            0
        } else {
            (40.0 * (*c as f64).ln_1p() / (max as f64).ln_1p()).round() as usize
        };
        out.push_str(&format!(
            "[{:.2}, {:.2}{} {:>10} {}\n",
            i as f64 / bins as f64,
            (i + 1) as f64 / bins as f64,
            if i + 1 == bins { "]" } else { ")" },
            c,
            "#".repeat(bar)
        ));
    }
    out
}

fn check_threshold(threshold: f64) -> Result<(), FilterError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(FilterError::Threshold(threshold));
    }
    Ok(())
}

/// Drop lines scoring below `threshold` from one document. Returns `None`
/// when nothing survives.
pub fn filter_document<C: TokenCounter + ?Sized>(
    doc: &ScoredDocument,
    threshold: f64,
    counter: &C,
    stats: &mut FilterStats,
) -> Option<Document> {
    stats.docs_total += 1;
    let mut kept: Vec<LineRecord> = Vec::new();
    for l in &doc.lines {
        let words = counter.count(&l.text);
        let chars = l.text.chars().count() as u64;
        stats.lines_total += 1;
        stats.words_total += words;
        stats.chars_total += chars;
        let bin = l.quality_score.bin(stats.histogram.len());
        stats.histogram[bin] += 1;
        if l.quality_score.below(threshold) {
            stats.lines_removed += 1;
            stats.words_removed += words;
            stats.chars_removed += chars;
        } else {
            kept.push(LineRecord {
                doc_id: doc.id.clone(),
                line_index: l.line_index,
                segment_index: l.segment_index,
                text: l.text.clone(),
                follows_space: l.follows_space,
            });
        }
    }
    if kept.is_empty() {
        stats.docs_dropped += 1;
        return None;
    }
    Some(Document {
        id: doc.id.clone(),
        text: crate::corpus::reconstruct_text(&kept),
        meta: doc.meta.clone(),
    })
}

/// Filter a sequence of scored documents at `threshold` (a score equal to
/// the threshold survives).
pub fn filter_corpus<'a, I>(docs: I, threshold: f64) -> Result<(Vec<Document>, FilterStats), FilterError>
where
    I: IntoIterator<Item = &'a ScoredDocument>,
{
    filter_corpus_with(docs, threshold, &WhitespaceWords)
}

pub fn filter_corpus_with<'a, I, C>(
    docs: I,
    threshold: f64,
    counter: &C,
) -> Result<(Vec<Document>, FilterStats), FilterError>
where
    I: IntoIterator<Item = &'a ScoredDocument>,
    C: TokenCounter + ?Sized,
{
    check_threshold(threshold)?;
    let mut stats = FilterStats::new(threshold);
    let kept = docs
        .into_iter()
        .filter_map(|d| filter_document(d, threshold, counter, &mut stats))
        .collect();
    Ok((kept, stats))
}

fn shard_files(dir: &Path) -> Result<Vec<PathBuf>, FilterError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("shard-") && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Filter every shard of a scored directory into `out_dir`, keeping shard
/// file names. Returns combined statistics.
pub fn filter_dir(scored_dir: &Path, threshold: f64, out_dir: &Path) -> Result<FilterStats, FilterError> {
    check_threshold(threshold)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let files = shard_files(scored_dir)?;
    if files.is_empty() {
        return Err(FilterError::Format {
            path: scored_dir.to_path_buf(),
            message: "no shard files found".into(),
        });
    }
    let per_shard: Vec<Result<FilterStats, FilterError>> = files
        .par_iter()
        .map(|path| {
            let docs = read_scored_shard(path)?;
            let (kept, stats) = filter_corpus(&docs, threshold)?;
            let out = out_dir.join(path.file_name().expect("shard files have names"));
            write_atomic(&out, &encode_docs(&kept)).map_err(io_err(&out))?;
            Ok(stats)
        })
        .collect();
    let mut total = FilterStats::new(threshold);
    for s in per_shard {
        total.merge(&s?);
    }
    Ok(total)
}

/// Document, line, word and character totals of a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusTotals {
    pub documents: u64,
    pub lines: u64,
    pub words: u64,
    pub chars: u64,
}

impl CorpusTotals {
    pub fn of<'a, I, C>(docs: I, counter: &C) -> Self
    where
        I: IntoIterator<Item = &'a Document>,
        C: TokenCounter + ?Sized,
    {
        let mut t = Self::default();
        for d in docs {
            t.documents += 1;
            for l in split_into_lines(d) {
                t.lines += 1;
                t.words += counter.count(&l.text);
                t.chars += l.text.chars().count() as u64;
            }
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub original: u64,
    pub filtered: u64,
    pub removed: u64,
    pub percent: f64,
}

impl Reduction {
    fn new(original: u64, filtered: u64) -> Self {
        let removed = original.saturating_sub(filtered);
        Self {
            original,
            filtered,
            removed,
            percent: pct(removed, original),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub documents: Reduction,
    pub lines: Reduction,
    pub words: Reduction,
    pub chars: Reduction,
}

impl ReductionReport {
    pub fn summary(&self) -> String {
        let row = |name: &str, r: &Reduction| {
            format!(
                "{name:<10} {:>14} {:>14} {:>14} {:>8.2}%\n",
                r.original, r.filtered, r.removed, r.percent
            )
        };
        let mut out = format!(
            "{:<10} {:>14} {:>14} {:>14} {:>9}\n",
            "", "original", "filtered", "removed", "reduction"
        );
        out.push_str(&row("documents", &self.documents));
        out.push_str(&row("lines", &self.lines));
        out.push_str(&row("words", &self.words));
        out.push_str(&row("chars", &self.chars));
        out
    }
}

/// Reduction of `filtered` relative to `original`. Words are
/// whitespace-delimited tokens unless another counter was used to build
/// the totals.
pub fn reduction_report(original: &CorpusTotals, filtered: &CorpusTotals) -> ReductionReport {
    ReductionReport {
        documents: Reduction::new(original.documents, filtered.documents),
        lines: Reduction::new(original.lines, filtered.lines),
        words: Reduction::new(original.words, filtered.words),
        chars: Reduction::new(original.chars, filtered.chars),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scored(id: &str, scores: &[u16]) -> ScoredDocument {
        let lines: Vec<ScoredLine> = scores
            .iter()
            .enumerate()
            .map(|(i, q)| ScoredLine {
                line_index: i,
                segment_index: 0,
                text: format!("line {i} of {id}"),
                follows_space: false,
                quality_score: QualityScore::from_ten_thousandths(*q).unwrap(),
            })
            .collect();
        ScoredDocument {
            id: id.into(),
            text: lines.iter().map(|l| l.text.clone()).collect::<Vec<_>>().join("\n"),
            meta: Map::new(),
            quality_score: lines.iter().map(|l| l.quality_score).collect(),
            lines,
        }
    }

    #[test]
    fn rounding_and_format() {
        assert_eq!(QualityScore::from_probability(0.96739).to_string(), "0.9674");
        assert_eq!(QualityScore::from_probability(0.5).to_string(), "0.5000");
        assert_eq!(QualityScore::from_probability(1.0).to_string(), "1.0000");
        assert_eq!(QualityScore::from_probability(0.00004).to_string(), "0.0000");
        let json = serde_json::to_string(&vec![QualityScore::from_probability(0.5)]).unwrap();
        assert_eq!(json, "[0.5000]");
        let back: Vec<QualityScore> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[0].ten_thousandths(), 5000);
        assert!(serde_json::from_str::<QualityScore>("1.5").is_err());
    }

    #[test]
    fn scored_document_serialization() {
        let mut d = scored("a", &[9674, 57]);
        d.meta.insert("url".into(), Value::String("http://x".into()));
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"quality_score\":[0.9674,0.0057]"), "{json}");
        assert!(json.contains("\"url\":\"http://x\""));
        let back: ScoredDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn threshold_keeps_lines_at_or_above() {
        let d = scored("a", &[9700, 3000, 6000]);
        let (kept, stats) = filter_corpus([&d], 0.5).unwrap();
        assert_eq!(kept[0].text, "line 0 of a\nline 2 of a");
        assert_eq!(stats.lines_removed, 1);
        let tie = scored("b", &[5000]);
        let (kept, _) = filter_corpus([&tie], 0.5).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn zero_threshold_is_identity() {
        let d = scored("a", &[0, 10, 10000]);
        let (kept, stats) = filter_corpus([&d], 0.0).unwrap();
        assert_eq!(kept[0].text, d.text);
        assert_eq!(stats.lines_removed, 0);
    }

    #[test]
    fn emptied_documents_dropped() {
        let d = scored("a", &[100, 200]);
        let (kept, stats) = filter_corpus([&d], 0.5).unwrap();
        assert!(kept.is_empty());
        assert_eq!(stats.docs_dropped, 1);
        assert!(filter_corpus([&d], 1.5).is_err());
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(
            histogram(&[0.05, 0.55, 0.95, 0.97], 10),
            vec![1, 0, 0, 0, 0, 1, 0, 0, 0, 2]
        );
        assert_eq!(histogram(&[1.0], 10)[9], 1);
        assert_eq!(histogram(&[0.0], 10)[0], 1);
        assert_eq!(QualityScore::MAX.bin(10), 9);
        assert_eq!(QualityScore::from_ten_thousandths(5500).unwrap().bin(10), 5);
        assert_eq!(QualityScore::from_ten_thousandths(999).unwrap().bin(10), 0);
        assert_eq!(QualityScore::from_ten_thousandths(1000).unwrap().bin(10), 1);
    }

    #[test]
    fn reduction_arithmetic() {
        let o = CorpusTotals {
            documents: 2,
            lines: 10,
            words: 100,
            chars: 500,
        };
        let f = CorpusTotals {
            documents: 2,
            lines: 8,
            words: 85,
            chars: 400,
        };
        let r = reduction_report(&o, &f);
        assert!((r.lines.percent - 20.0).abs() < 1e-12);
        assert!((r.words.percent - 15.0).abs() < 1e-12);
        let same = reduction_report(&o, &o);
        assert_eq!(same.lines.percent, 0.0);
        assert_eq!(same.documents.percent, 0.0);
        let empty = reduction_report(&o, &CorpusTotals::default());
        assert_eq!(empty.lines.percent, 100.0);
        assert_eq!(empty.documents.removed, o.documents);
    }

    #[test]
    fn segmented_lines_rejoin() {
        let mut d = scored("a", &[9000, 9000, 100]);
        d.lines[1].line_index = 0;
        d.lines[1].segment_index = 1;
        d.lines[1].follows_space = true;
        d.lines[2].line_index = 1;
        let (kept, _) = filter_corpus([&d], 0.5).unwrap();
        assert_eq!(kept[0].text, "line 0 of a line 1 of a");
    }

    proptest! {
        #[test]
        fn threshold_monotone(docs in proptest::collection::vec(proptest::collection::vec(0u16..=10000, 1..8), 1..20),
                              t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let docs: Vec<ScoredDocument> = docs.iter().enumerate().map(|(i, s)| scored(&format!("d{i}"), s)).collect();
            let survivors = |t: f64| -> Vec<(String, usize)> {
                docs.iter().flat_map(|d| d.lines.iter().filter(move |l| !l.quality_score.below(t)).map(move |l| (d.id.clone(), l.line_index))).collect()
            };
            let at_lo = survivors(lo);
            for s in survivors(hi) {
                prop_assert!(at_lo.contains(&s));
            }
            let (_, stats) = filter_corpus(&docs, lo).unwrap();
            prop_assert_eq!(stats.histogram.iter().sum::<u64>(), stats.lines_total);
            prop_assert_eq!(stats.lines_total - stats.lines_removed, at_lo.len() as u64);
        }
    }
}
