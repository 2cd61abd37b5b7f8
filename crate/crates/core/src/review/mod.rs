//! Review queues for label verification and inter-annotator agreement,
//! with durable verdict storage. [`http`] exposes them over HTTP.

pub mod http;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{AnnotationItem, AnnotationSession, AnnotatorVerdict};
use crate::corpus::{LineRecord, LineRef};
use crate::labeler::canonicalize_label;
use crate::taxonomy::{Category, VerdictDecision, VerificationVerdict};

pub const DEFAULT_SAMPLE_SIZE: usize = 20;
pub const DEFAULT_CONTEXT_LINES: usize = 2;
pub const DEFAULT_SEED: u64 = 42;
const LOG_FILE: &str = "log.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    KindMismatch(String),
    #[error("storage: {0}")]
    Storage(String),
}

fn storage(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Storage(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    LabelVerification,
    Iaa,
}

/// One labeled line of the data a service reviews. Reads both labels files
/// and categorized files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewLine {
    #[serde(flatten)]
    pub line: LineRecord,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

/// Labeled lines indexed by document for context lookup.
#[derive(Debug, Clone, Default)]
pub struct ReviewData {
    lines: Vec<ReviewLine>,
    /// doc id → positions in `lines`, in line/segment order
    docs: HashMap<String, Vec<usize>>,
    doc_order: Vec<String>,
}

impl ReviewData {
    pub fn new(lines: Vec<ReviewLine>) -> Self {
        let mut docs: HashMap<String, Vec<usize>> = HashMap::new();
        let mut doc_order = Vec::new();
        for (i, l) in lines.iter().enumerate() {
            let entry = docs.entry(l.line.doc_id.clone()).or_default();
            if entry.is_empty() {
                doc_order.push(l.line.doc_id.clone());
            }
            entry.push(i);
        }
        for positions in docs.values_mut() {
            positions.sort_by_key(|&i| (lines[i].line.line_index, lines[i].line.segment_index));
        }
        Self {
            lines,
            docs,
            doc_order,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let lines = crate::io::read_jsonl(path)
            .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
        Ok(Self::new(lines))
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    fn item(&self, pos: usize, context: usize, kind: SessionKind) -> SessionItem {
        let l = &self.lines[pos];
        let doc = &self.docs[&l.line.doc_id];
        let at = doc.iter().position(|&p| p == pos).expect("line indexed under its document");
        let before = doc[at.saturating_sub(context)..at]
            .iter()
            .map(|&p| self.lines[p].line.text.clone())
            .collect();
        let after = doc[at + 1..(at + 1 + context).min(doc.len())]
            .iter()
            .map(|&p| self.lines[p].line.text.clone())
            .collect();
        let llm_label = match kind {
            SessionKind::LabelVerification => l.label.clone(),
            SessionKind::Iaa => l.category.map(|c| c.name().to_string()).unwrap_or_default(),
        };
        SessionItem {
            line: l.line.key(),
            text: l.line.text.clone(),
            llm_label,
            category: l.category,
            context_before: before,
            context_after: after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionItem {
    pub line: LineRef,
    pub text: String,
    pub llm_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    pub context_before: Vec<String>,
    pub context_after: Vec<String>,
}

/// What an annotator said about one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Verdict {
    /// Verification: whether the line is genuinely low quality.
    Quality { low_quality: bool },
    Agreement(AnnotatorVerdict),
}

impl Verdict {
    fn kind(&self) -> SessionKind {
        match self {
            Verdict::Quality { .. } => SessionKind::LabelVerification,
            Verdict::Agreement(_) => SessionKind::Iaa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredVerdict {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    pub kind: SessionKind,
    pub created_at: DateTime<Utc>,
    pub seed: u64,
    pub items: Vec<SessionItem>,
    #[serde(default)]
    pub verdicts: BTreeMap<String, BTreeMap<usize, StoredVerdict>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Body of a session creation request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub kind: Option<SessionKind>,
    #[serde(default)]
    pub session_id: Option<String>,
    /// Verification: labels to sample.
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub sample_size: Option<usize>,
    /// Agreement: explicit documents, or a number of documents to sample.
    #[serde(default)]
    pub documents: Vec<String>,
    #[serde(default)]
    pub sample_documents: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub context_lines: Option<usize>,
}

/// Body of a verdict submission. Verification sessions take
/// `low_quality`; agreement sessions take `agrees` and, when disagreeing,
/// `corrected_label`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitVerdict {
    #[serde(default)]
    pub annotator: Option<String>,
    pub item_id: usize,
    #[serde(default)]
    pub low_quality: Option<bool>,
    #[serde(default)]
    pub agrees: Option<bool>,
    #[serde(default)]
    pub corrected_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTally {
    pub label: String,
    pub items: usize,
    pub answered: usize,
    pub high_quality: usize,
    pub low_quality: usize,
    /// Decision the answered items support so far.
    pub decision: VerdictDecision,
    /// Every sampled item of this label has a verdict.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub kind: SessionKind,
    pub total: usize,
    pub completed: BTreeMap<String, usize>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<BTreeMap<String, Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<LabelTally>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: usize,
    pub kind: SessionKind,
    #[serde(flatten)]
    pub item: SessionItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub done: bool,
    pub answered: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<ReviewItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    /// An earlier verdict by the same annotator was replaced.
    pub replaced: bool,
    pub summary: SessionSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Export {
    Verdicts(Vec<VerificationVerdict>),
    Session(AnnotationSession),
}

/// A label is remapped when strictly more than half of its answered items
/// were judged high quality.
pub fn majority_decision(high_quality: usize, answered: usize) -> VerdictDecision {
    if answered > 0 && 2 * high_quality > answered {
        VerdictDecision::RemapToClean
    } else {
        VerdictDecision::Keep
    }
}

impl ReviewSession {
    pub fn answered(&self, annotator: &str) -> usize {
        self.verdicts.get(annotator).map_or(0, BTreeMap::len)
    }

    /// Items judged high quality by a strict majority of the annotators who
    /// answered them; `None` for unanswered items.
    fn item_quality(&self, index: usize) -> Option<bool> {
        let (mut high, mut low) = (0, 0);
        for v in self.verdicts.values() {
            if let Some(StoredVerdict {
                verdict: Verdict::Quality { low_quality },
                ..
            }) = v.get(&index)
            {
                if *low_quality {
                    low += 1;
                } else {
                    high += 1;
                }
            }
        }
        (high + low > 0).then_some(high > low)
    }

    fn label_groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, item) in self.items.iter().enumerate() {
            groups.entry(item.llm_label.as_str()).or_default().push(i);
        }
        groups
    }

    pub fn tallies(&self) -> Vec<LabelTally> {
        self.label_groups()
            .into_iter()
            .map(|(label, idx)| {
                let judged: Vec<bool> = idx.iter().filter_map(|&i| self.item_quality(i)).collect();
                let high = judged.iter().filter(|h| **h).count();
                LabelTally {
                    label: label.to_string(),
                    items: idx.len(),
                    answered: judged.len(),
                    high_quality: high,
                    low_quality: judged.len() - high,
                    decision: majority_decision(high, judged.len()),
                    complete: judged.len() == idx.len(),
                }
            })
            .collect()
    }

    pub fn to_annotation_session(&self) -> AnnotationSession {
        AnnotationSession {
            session_id: self.session_id.clone(),
            items: self
                .items
                .iter()
                .map(|i| AnnotationItem {
                    line: i.line.clone(),
                    text: i.text.clone(),
                    llm_label: i.category.unwrap_or(Category::Clean),
                })
                .collect(),
            verdicts: self
                .verdicts
                .iter()
                .map(|(a, v)| {
                    let v = v
                        .iter()
                        .filter_map(|(&i, s)| match s.verdict {
                            Verdict::Agreement(av) => Some((i, av)),
                            Verdict::Quality { .. } => None,
                        })
                        .collect();
                    (a.clone(), v)
                })
                .collect(),
        }
    }

    pub fn is_complete(&self) -> bool {
        match self.kind {
            SessionKind::LabelVerification => (0..self.items.len()).all(|i| self.item_quality(i).is_some()),
            SessionKind::Iaa => {
                !self.verdicts.is_empty() && self.verdicts.values().all(|v| v.len() == self.items.len())
            }
        }
    }

    pub fn summary(&self) -> SessionSummary {
        let completed = self
            .verdicts
            .iter()
            .map(|(a, v)| (a.clone(), v.len()))
            .collect();
        let (kappa, labels) = match self.kind {
            SessionKind::Iaa => {
                let s = self.to_annotation_session();
                let k = s
                    .annotators()
                    .map(|a| (a.to_string(), s.answered_kappa(a)))
                    .collect();
                (Some(k), None)
            }
            SessionKind::LabelVerification => (None, Some(self.tallies())),
        };
        SessionSummary {
            session_id: self.session_id.clone(),
            kind: self.kind,
            total: self.items.len(),
            completed,
            complete: self.is_complete(),
            kappa,
            labels,
            warnings: self.warnings.clone(),
        }
    }

    pub fn next_item(&self, annotator: &str) -> NextItem {
        let done = self.verdicts.get(annotator);
        let next = (0..self.items.len()).find(|i| done.is_none_or(|d| !d.contains_key(i)));
        NextItem {
            done: next.is_none(),
            answered: self.answered(annotator),
            total: self.items.len(),
            item: next.map(|i| ReviewItem {
                item_id: i,
                kind: self.kind,
                item: self.items[i].clone(),
            }),
        }
    }

    /// Verification verdicts in taxonomy form. With `partial`, labels whose
    /// sampled items are not all answered are exported as `keep`.
    pub fn verification_verdicts(&self, partial: bool) -> Result<Vec<VerificationVerdict>, ServiceError> {
        let tallies = self.tallies();
        let open: Vec<String> = tallies
            .iter()
            .filter(|t| !t.complete)
            .map(|t| format!("{}: {} of {} items unanswered", t.label, t.items - t.answered, t.items))
            .collect();
        if !partial && !open.is_empty() {
            return Err(ServiceError::Invalid(format!(
                "session {} is incomplete ({})",
                self.session_id,
                open.join("; ")
            )));
        }
        let groups = self.label_groups();
        Ok(tallies
            .into_iter()
            .map(|t| {
                let idx = &groups[t.label.as_str()];
                let mut reviewers = BTreeSet::new();
                let mut last = None;
                for (annotator, v) in &self.verdicts {
                    for i in idx {
                        if let Some(s) = v.get(i) {
                            reviewers.insert(annotator.as_str());
                            last = last.max(Some(s.at));
                        }
                    }
                }
                VerificationVerdict {
                    decision: if t.complete { t.decision } else { VerdictDecision::Keep },
                    evidence: idx.iter().map(|&i| self.items[i].line.clone()).collect(),
                    reviewer: if reviewers.is_empty() {
                        "unreviewed".to_string()
                    } else {
                        reviewers.into_iter().collect::<Vec<_>>().join("+")
                    },
                    timestamp: last.unwrap_or(self.created_at),
                    label: t.label,
                }
            })
            .collect())
    }

    pub fn export(&self, partial: bool) -> Result<Export, ServiceError> {
        match self.kind {
            SessionKind::LabelVerification => Ok(Export::Verdicts(self.verification_verdicts(partial)?)),
            SessionKind::Iaa => {
                if !partial && !self.is_complete() {
                    let remaining: Vec<String> = if self.verdicts.is_empty() {
                        vec![format!("no verdicts on {} items", self.items.len())]
                    } else {
                        self.verdicts
                            .iter()
                            .filter(|(_, v)| v.len() < self.items.len())
                            .map(|(a, v)| format!("{a}: {} items remaining", self.items.len() - v.len()))
                            .collect()
                    };
                    return Err(ServiceError::Invalid(format!(
                        "session {} is incomplete ({})",
                        self.session_id,
                        remaining.join("; ")
                    )));
                }
                Ok(Export::Session(self.to_annotation_session()))
            }
        }
    }

    /// Check a submission against this session and turn it into a verdict.
    pub fn validate(&self, req: &SubmitVerdict) -> Result<Verdict, ServiceError> {
        if req.item_id >= self.items.len() {
            return Err(ServiceError::NotFound(format!(
                "session {} has no item {} ({} items)",
                self.session_id,
                req.item_id,
                self.items.len()
            )));
        }
        let verdict = match (req.low_quality, req.agrees) {
            (Some(_), Some(_)) => {
                return Err(ServiceError::Invalid(
                    "give either low_quality or agrees, not both".into(),
                ))
            }
            (None, None) => {
                return Err(ServiceError::Invalid(
                    "verdict needs low_quality (verification) or agrees (iaa)".into(),
                ))
            }
            (Some(low_quality), None) => {
                if req.corrected_label.is_some() {
                    return Err(ServiceError::Invalid(
                        "corrected_label only applies to iaa verdicts".into(),
                    ));
                }
                Verdict::Quality { low_quality }
            }
            (None, Some(agrees)) => {
                let corrected_label = req
                    .corrected_label
                    .as_deref()
                    .map(str::parse::<Category>)
                    .transpose()
                    .map_err(|e| ServiceError::Invalid(e.to_string()))?;
                let v = AnnotatorVerdict {
                    agrees,
                    corrected_label,
                };
                v.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
                Verdict::Agreement(v)
            }
        };
        if verdict.kind() != self.kind {
            return Err(ServiceError::KindMismatch(format!(
                "session {} is a {:?} session; verdict is for {:?}",
                self.session_id,
                self.kind,
                verdict.kind()
            )));
        }
        Ok(verdict)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Event {
    Create {
        seq: u64,
        session: Box<ReviewSession>,
    },
    Verdict {
        seq: u64,
        session_id: String,
        annotator: String,
        item_id: usize,
        verdict: StoredVerdict,
    },
}

impl Event {
    fn seq(&self) -> u64 {
        match self {
            Event::Create { seq, .. } | Event::Verdict { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Snapshot {
    last_seq: u64,
    sessions: BTreeMap<String, ReviewSession>,
}

impl Snapshot {
    fn apply(&mut self, event: Event) -> Option<StoredVerdict> {
        let seq = event.seq();
        let replaced = match event {
            Event::Create { session, .. } => {
                self.sessions.insert(session.session_id.clone(), *session);
                None
            }
            Event::Verdict {
                session_id,
                annotator,
                item_id,
                verdict,
                ..
            } => self
                .sessions
                .get_mut(&session_id)
                .and_then(|s| s.verdicts.entry(annotator).or_default().insert(item_id, verdict)),
        };
        self.last_seq = seq;
        replaced
    }
}

struct LogWriter {
    file: File,
    path: PathBuf,
}

impl LogWriter {
    /// Append one event and flush it to disk.
    fn append(&mut self, event: &Event) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(event).expect("events serialize");
        line.push(b'\n');
        self.file.write_all(&line).map_err(storage(&self.path))?;
        self.file.sync_data().map_err(storage(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewConfig {
    pub sample_size: usize,
    pub context_lines: usize,
    pub seed: u64,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            sample_size: DEFAULT_SAMPLE_SIZE,
            context_lines: DEFAULT_CONTEXT_LINES,
            seed: DEFAULT_SEED,
        }
    }
}

/// Sessions over one data set, persisted under a state directory as a
/// snapshot plus an append-only event log. Every mutation is appended and
/// synced before it becomes visible.
pub struct ReviewService {
    data: ReviewData,
    config: ReviewConfig,
    state: RwLock<Snapshot>,
    log: Mutex<LogWriter>,
}

fn read_log(path: &Path) -> Result<Vec<Event>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(storage(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(storage(path))?;
    let mut events = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("{}: ignoring torn final record: {e}", path.display());
            }
            Err(e) => {
                return Err(ServiceError::Storage(format!(
                    "{}:{}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(events)
}

impl ReviewService {
    /// Open `state_dir`, replaying the snapshot and log found there, then
    /// compact them into a fresh snapshot.
    pub fn open(data: ReviewData, state_dir: &Path, config: ReviewConfig) -> Result<Self, ServiceError> {
        fs::create_dir_all(state_dir).map_err(storage(state_dir))?;
        let snap_path = state_dir.join(SNAPSHOT_FILE);
        let mut snapshot: Snapshot = if snap_path.exists() {
            crate::io::read_json(&snap_path)
                .map_err(|e| ServiceError::Storage(format!("{}: {e}", snap_path.display())))?
        } else {
            Snapshot::default()
        };
        let log_path = state_dir.join(LOG_FILE);
        let mut replayed = 0;
        for event in read_log(&log_path)? {
            if event.seq() > snapshot.last_seq {
                snapshot.apply(event);
                replayed += 1;
            }
        }
        if replayed > 0 {
            log::info!("replayed {replayed} events from {}", log_path.display());
        }
        crate::io::write_json_atomic(&snap_path, &snapshot).map_err(storage(&snap_path))?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&log_path)
            .map_err(storage(&log_path))?;
        file.sync_all().map_err(storage(&log_path))?;
        Ok(Self {
            data,
            config,
            state: RwLock::new(snapshot),
            log: Mutex::new(LogWriter {
                file,
                path: log_path,
            }),
        })
    }

    pub fn data(&self) -> &ReviewData {
        &self.data
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Snapshot> {
        self.state.read().unwrap_or_else(|p| p.into_inner())
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&ReviewSession) -> T) -> Result<T, ServiceError> {
        let state = self.read();
        let s = state
            .sessions
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {id}")))?;
        Ok(f(s))
    }

    /// Append `event`, then apply it. Callers hold the log lock, so
    /// validation done under it stays valid.
    fn commit(&self, log: &mut LogWriter, event: Event) -> Result<Option<StoredVerdict>, ServiceError> {
        log.append(&event)?;
        let mut state = self.state.write().unwrap_or_else(|p| p.into_inner());
        Ok(state.apply(event))
    }

    fn lock_log(&self) -> std::sync::MutexGuard<'_, LogWriter> {
        self.log.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        self.read().sessions.values().map(ReviewSession::summary).collect()
    }

    pub fn session(&self, id: &str) -> Result<ReviewSession, ServiceError> {
        self.with_session(id, Clone::clone)
    }

    pub fn summary(&self, id: &str) -> Result<SessionSummary, ServiceError> {
        self.with_session(id, ReviewSession::summary)
    }

    pub fn next_item(&self, id: &str, annotator: &str) -> Result<NextItem, ServiceError> {
        self.with_session(id, |s| s.next_item(annotator))
    }

    pub fn export(&self, id: &str, partial: bool) -> Result<Export, ServiceError> {
        self.with_session(id, |s| s.export(partial))?
    }

    /// Build a session from `req` without storing it.
    pub fn build_session(&self, req: &CreateSession, session_id: String) -> Result<ReviewSession, ServiceError> {
        let kind = req
            .kind
            .ok_or_else(|| ServiceError::Invalid("kind is required (label_verification or iaa)".into()))?;
        let seed = req.seed.unwrap_or(self.config.seed);
        let context = req.context_lines.unwrap_or(self.config.context_lines);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut warnings = Vec::new();
        let mut positions = Vec::new();
        match kind {
            SessionKind::LabelVerification => {
                if req.labels.is_empty() {
                    return Err(ServiceError::Invalid("verification sessions need labels".into()));
                }
                if !req.documents.is_empty() || req.sample_documents.is_some() {
                    return Err(ServiceError::Invalid(
                        "documents and sample_documents apply to iaa sessions".into(),
                    ));
                }
                let k = req.sample_size.unwrap_or(self.config.sample_size);
                if k == 0 {
                    return Err(ServiceError::Invalid("sample_size must be at least 1".into()));
                }
                let mut by_label: HashMap<String, Vec<usize>> = HashMap::new();
                for (i, l) in self.data.lines.iter().enumerate() {
                    by_label.entry(canonicalize_label(&l.label)).or_default().push(i);
                }
                let mut seen = BTreeSet::new();
                for raw in &req.labels {
                    let label = canonicalize_label(raw);
                    if !seen.insert(label.clone()) {
                        continue;
                    }
                    let lines = by_label.get(&label).map(Vec::as_slice).unwrap_or(&[]);
                    if lines.is_empty() {
                        let msg = format!("label {label:?} has no lines; skipped");
                        log::warn!("{msg}");
                        warnings.push(msg);
                        continue;
                    }
                    if lines.len() < k {
                        let msg = format!(
                            "label {label:?} has {} lines, fewer than sample size {k}; all included",
                            lines.len()
                        );
                        log::warn!("{msg}");
                        warnings.push(msg);
                        positions.extend_from_slice(lines);
                    } else {
                        let mut picked = rand::seq::index::sample(&mut rng, lines.len(), k).into_vec();
                        picked.sort_unstable();
                        positions.extend(picked.into_iter().map(|j| lines[j]));
                    }
                }
            }
            SessionKind::Iaa => {
                if !req.labels.is_empty() || req.sample_size.is_some() {
                    return Err(ServiceError::Invalid(
                        "labels and sample_size apply to verification sessions".into(),
                    ));
                }
                let docs: Vec<String> = match (req.documents.is_empty(), req.sample_documents) {
                    (false, None) => {
                        for d in &req.documents {
                            if !self.data.docs.contains_key(d) {
                                return Err(ServiceError::Invalid(format!("unknown document {d}")));
                            }
                        }
                        req.documents.clone()
                    }
                    (true, Some(n)) if n >= 1 => {
                        let total = self.data.doc_order.len();
                        let n = if n > total {
                            warnings.push(format!("only {total} documents available; all included"));
                            total
                        } else {
                            n
                        };
                        let mut picked = rand::seq::index::sample(&mut rng, total, n).into_vec();
                        picked.sort_unstable();
                        picked.into_iter().map(|i| self.data.doc_order[i].clone()).collect()
                    }
                    _ => {
                        return Err(ServiceError::Invalid(
                            "iaa sessions need either documents or sample_documents >= 1".into(),
                        ))
                    }
                };
                for d in &docs {
                    for &p in &self.data.docs[d] {
                        if self.data.lines[p].category.is_none() {
                            return Err(ServiceError::Invalid(format!(
                                "line {} has no category; iaa sessions need categorized data",
                                self.data.lines[p].line.key()
                            )));
                        }
                        positions.push(p);
                    }
                }
            }
        }
        if positions.is_empty() {
            return Err(ServiceError::Invalid(format!(
                "session would be empty{}",
                if warnings.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", warnings.join("; "))
                }
            )));
        }
        Ok(ReviewSession {
            session_id,
            kind,
            created_at: Utc::now(),
            seed,
            items: positions
                .into_iter()
                .map(|p| self.data.item(p, context, kind))
                .collect(),
            verdicts: BTreeMap::new(),
            warnings,
        })
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<SessionSummary, ServiceError> {
        let mut log = self.lock_log();
        let (id, seq) = {
            let state = self.read();
            let id = match &req.session_id {
                Some(id) if id.trim().is_empty() || id.contains('/') => {
                    return Err(ServiceError::Invalid(format!("invalid session id {id:?}")))
                }
                Some(id) if state.sessions.contains_key(id) => {
                    return Err(ServiceError::Invalid(format!("session {id} already exists")))
                }
                Some(id) => id.clone(),
                None => {
                    let mut n = state.sessions.len() + 1;
                    while state.sessions.contains_key(&format!("s{n}")) {
                        n += 1;
                    }
                    format!("s{n}")
                }
            };
            (id, state.last_seq + 1)
        };
        let session = self.build_session(req, id)?;
        let summary = session.summary();
        self.commit(
            &mut log,
            Event::Create {
                seq,
                session: Box::new(session),
            },
        )?;
        Ok(summary)
    }

    pub fn submit_verdict(
        &self,
        session_id: &str,
        annotator: &str,
        req: &SubmitVerdict,
    ) -> Result<SubmitOutcome, ServiceError> {
        if annotator.trim().is_empty() {
            return Err(ServiceError::Invalid("annotator id is required".into()));
        }
        let mut log = self.lock_log();
        let (verdict, seq) = {
            let state = self.read();
            let s = state
                .sessions
                .get(session_id)
                .ok_or_else(|| ServiceError::NotFound(format!("unknown session {session_id}")))?;
            (s.validate(req)?, state.last_seq + 1)
        };
        let replaced = self.commit(
            &mut log,
            Event::Verdict {
                seq,
                session_id: session_id.to_string(),
                annotator: annotator.to_string(),
                item_id: req.item_id,
                verdict: StoredVerdict {
                    verdict,
                    at: Utc::now(),
                },
            },
        )?;
        if replaced.is_some() {
            log::info!("{annotator} resubmitted item {} of {session_id}", req.item_id);
        }
        Ok(SubmitOutcome {
            replaced: replaced.is_some(),
            summary: self.summary(session_id)?,
        })
    }
}
