//! Line labeling through a chat-completion endpoint.
//!
//! Lines are sent in batches of consecutive lines together with the current
//! label list. The model answers with one label per line, either reusing a
//! listed label or inventing a short descriptive one. New labels join the
//! registry and the list is reshuffled after every batch so that label order
//! does not bias later answers.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{make_batches, Batch, CorpusError, Document, LineRecord, LineRef, LineSplitter};
use crate::io::{write_atomic, write_json_atomic};

pub const CLEAN_LABEL: &str = "Clean";

/// Version tag of the instruction text in [`build_prompt`].
pub const PROMPT_VERSION: &str = "linequal-label-v1";

pub const API_KEY_ENV: &str = "LINEQUAL_API_KEY";

const INSTRUCTIONS: &str = "\
You are assessing the quality of web text that will be used to train a large language model.
Below is a numbered batch of consecutive lines from one web document. Classify every line.

Use the label \"Clean\" for high-quality text: continuous, human-written natural language from the \
main content of the page, such as the body of an article, a forum post, an interview, a blog or a \
recipe, that is suitable for training a large language model.

Any other line is low-quality. Give it a short descriptive label (a few words) that names what the \
line is, for example navigation menus, copyright notices, programming code, metadata, timestamps \
or formatting artifacts. Reuse a label from the list below whenever one fits. Only create a new \
short descriptive label when none of the existing labels describes the line.";

#[derive(Debug, Error)]
pub enum ResponseError {
    #[error("no JSON array of label strings found in response")]
    Unparseable,
    #[error("expected {expected} labels, response has {got}")]
    CountMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("unexpected response body: {0}")]
    Protocol(String),
    #[error("mock transcript has no response for batch {batch} attempt {attempt}")]
    MissingScript { batch: String, attempt: u32 },
}

#[derive(Debug, Error)]
pub enum LabelerError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("batch {batch}: endpoint failed after {attempts} attempts: {source}")]
    Endpoint {
        batch: String,
        attempts: u32,
        #[source]
        source: ClientError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid labeler config: {0}")]
    Config(String),
    #[error("label conservation violated: registry counts {registry} != labeled lines {lines}")]
    Conservation { registry: u64, lines: u64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabelerError + '_ {
    move |source| LabelerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Case-fold, trim and collapse internal whitespace. Any spelling of
/// "clean" maps to [`CLEAN_LABEL`].
pub fn canonicalize_label(raw: &str) -> String {
    let folded = raw
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    if folded == "clean" {
        CLEAN_LABEL.to_string()
    } else {
        folded
    }
}

/// The dynamic label set with per-label line counts.
///
/// Labels retired by refinement (remapped to Clean) are remembered so that
/// repeated refinement stays idempotent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRegistry {
    labels: IndexMap<String, u64>,
    presentation_order: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    retired: BTreeSet<String>,
}

impl Default for LabelRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl LabelRegistry {
    pub fn new() -> Self {
        let mut labels = IndexMap::new();
        labels.insert(CLEAN_LABEL.to_string(), 0);
        Self {
            labels,
            presentation_order: vec![CLEAN_LABEL.to_string()],
            retired: BTreeSet::new(),
        }
    }

    /// Registry holding exactly the given counts, in first-seen order.
    pub fn from_labels<'a, I: IntoIterator<Item = &'a str>>(labels: I) -> Self {
        let mut reg = Self::new();
        for label in labels {
            reg.add(&canonicalize_label(label), 1);
        }
        reg
    }

    fn add(&mut self, name: &str, count: u64) {
        match self.labels.get_mut(name) {
            Some(c) => *c += count,
            None => {
                self.labels.insert(name.to_string(), count);
                self.presentation_order.push(name.to_string());
                self.retired.remove(name);
            }
        }
    }

    pub fn count(&self, label: &str) -> Option<u64> {
        self.labels.get(label).copied()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains_key(label)
    }

    pub fn is_retired(&self, label: &str) -> bool {
        self.retired.contains(label)
    }

    /// Number of labels including Clean.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of descriptive (non-Clean) labels.
    pub fn descriptive_len(&self) -> usize {
        self.labels.len() - usize::from(self.labels.contains_key(CLEAN_LABEL))
    }

    pub fn total(&self) -> u64 {
        self.labels.values().sum()
    }

    /// Labels with counts, in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn presentation_order(&self) -> &[String] {
        &self.presentation_order
    }

    pub fn retired(&self) -> impl Iterator<Item = &str> {
        self.retired.iter().map(String::as_str)
    }

    /// Fold every line of `from` into Clean and drop the label.
    pub(crate) fn retire(&mut self, from: &str) {
        if from == CLEAN_LABEL {
            return;
        }
        if let Some(count) = self.labels.shift_remove(from) {
            *self.labels.entry(CLEAN_LABEL.to_string()).or_insert(0) += count;
            self.presentation_order.retain(|l| l != from);
            self.retired.insert(from.to_string());
        }
    }

    /// Count the assigned labels, adding unseen ones, then reshuffle the
    /// presentation order.
    pub fn ingest_assignments<R: Rng + ?Sized>(
        &mut self,
        assignments: &[LabelAssignment],
        rng: &mut R,
    ) {
        for a in assignments {
            self.add(&canonicalize_label(&a.label), 1);
        }
        self.presentation_order.shuffle(rng);
    }

    /// Registry whose counts are exactly the label frequencies of `lines`.
    pub fn from_lines<'a, I: IntoIterator<Item = &'a LabeledLine>>(lines: I) -> Self {
        let mut reg = Self::new();
        for l in lines {
            reg.add(&l.label, 1);
        }
        reg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub line: LineRef,
    pub label: String,
}

/// A line with its assigned label; one JSONL record of the labels file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledLine {
    #[serde(flatten)]
    pub line: LineRecord,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    pub endpoint: String,
    pub model_name: String,
    pub max_retries: u32,
    pub request_timeout_secs: u64,
    pub max_concurrent_requests: usize,
    pub rng_seed: u64,
    pub batch_lines: usize,
    /// Documents per checkpoint.
    pub checkpoint_every: usize,
    pub segmentation: LineSplitter,
    /// Replay responses from this transcript instead of calling `endpoint`.
    pub mock_transcript: Option<PathBuf>,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4o-mini".into(),
            max_retries: 3,
            request_timeout_secs: 120,
            max_concurrent_requests: 1,
            rng_seed: 42,
            batch_lines: crate::corpus::DEFAULT_MAX_BATCH_LINES,
            checkpoint_every: 1000,
            segmentation: LineSplitter::default(),
            mock_transcript: None,
        }
    }
}

impl LabelerConfig {
    pub fn load(path: &Path) -> Result<Self, LabelerError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| LabelerError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LabelerError> {
        if self.max_concurrent_requests == 0 {
            return Err(LabelerError::Config(
                "max_concurrent_requests must be at least 1".into(),
            ));
        }
        if self.batch_lines == 0 || self.checkpoint_every == 0 {
            return Err(LabelerError::Config(
                "batch_lines and checkpoint_every must be at least 1".into(),
            ));
        }
        if self.segmentation.max_segment_chars == 0 {
            return Err(LabelerError::Config(
                "max_segment_chars must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Prompt text for one batch: instructions, the label list in its current
/// presentation order, and the numbered lines.
pub fn build_prompt(batch: &Batch, registry: &LabelRegistry) -> String {
    assert!(!batch.is_empty(), "cannot build a prompt for an empty batch");
    let mut out = String::with_capacity(2048);
    out.push_str(INSTRUCTIONS);
    out.push_str("\n\nExisting labels:\n");
    for label in registry.presentation_order() {
        out.push_str("- ");
        out.push_str(label);
        out.push('\n');
    }
    out.push_str("\nLines:\n");
    for (i, line) in batch.lines.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, line.text));
    }
    out.push_str(&format!(
        "\nAnswer with a JSON array of exactly {n} strings, one label per line in the order \
         given (line 1 first). Output nothing except the array.\n",
        n = batch.len()
    ));
    out
}

/// Extract `batch_size` canonical labels from a model answer. The array
/// may be surrounded by prose or a markdown code fence.
pub fn parse_response(raw: &str, batch_size: usize) -> Result<Vec<String>, ResponseError> {
    assert!(batch_size >= 1);
    let mut found = None;
    for (pos, _) in raw.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<Vec<String>>();
        if let Some(Ok(labels)) = stream.next() {
            found = Some(labels);
            break;
        }
    }
    let labels = found.ok_or(ResponseError::Unparseable)?;
    if labels.len() != batch_size {
        return Err(ResponseError::CountMismatch {
            expected: batch_size,
            got: labels.len(),
        });
    }
    let labels: Vec<String> = labels.iter().map(|l| canonicalize_label(l)).collect();
    if labels.iter().any(String::is_empty) {
        return Err(ResponseError::Unparseable);
    }
    Ok(labels)
}

/// One chat-completion call.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    /// Not sent over the wire; lets replay clients key their answers.
    pub batch_key: String,
    pub attempt: u32,
}

impl ChatRequest {
    pub fn body(&self) -> Value {
        json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": self.prompt }],
            "temperature": 0,
        })
    }
}

pub trait ChatClient: Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

/// OpenAI-compatible chat-completions client.
pub struct HttpChatClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            api_key,
        }
    }

    pub fn from_config(cfg: &LabelerConfig) -> Self {
        Self::new(
            cfg.endpoint.clone(),
            Duration::from_secs(cfg.request_timeout_secs),
            std::env::var(API_KEY_ENV).ok(),
        )
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(request.body())
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Protocol("missing choices[0].message.content".into()))
    }
}

/// One transcript entry. `batch` is the batch key (`doc:line:segment` of
/// its first line) or `*` for a fallback; a missing `attempt` matches any
/// attempt. An `error` entry simulates a transport failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub batch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Replays canned responses from a transcript.
#[derive(Debug, Clone, Default)]
pub struct MockChatClient {
    exact: HashMap<(String, u32), TranscriptEntry>,
    any_attempt: HashMap<String, TranscriptEntry>,
}

impl MockChatClient {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut client = Self::default();
        for e in entries {
            match e.attempt {
                Some(a) => {
                    client.exact.insert((e.batch.clone(), a), e);
                }
                None => {
                    client.any_attempt.insert(e.batch.clone(), e);
                }
            }
        }
        client
    }

    /// Client answering every line of every batch with `label`.
    pub fn constant(label: &str) -> ConstantChatClient {
        ConstantChatClient(label.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, LabelerError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|e| LabelerError::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }
}

impl ChatClient for MockChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let entry = self
            .exact
            .get(&(request.batch_key.clone(), request.attempt))
            .or_else(|| self.any_attempt.get(&request.batch_key))
            .or_else(|| self.any_attempt.get("*"))
            .ok_or_else(|| ClientError::MissingScript {
                batch: request.batch_key.clone(),
                attempt: request.attempt,
            })?;
        match (&entry.response, &entry.error) {
            (_, Some(err)) => Err(ClientError::Transport(err.clone())),
            (Some(resp), None) => Ok(resp.clone()),
            (None, None) => Err(ClientError::Protocol("empty transcript entry".into())),
        }
    }
}

/// Answers with the same label for every line of the prompt.
#[derive(Debug, Clone)]
pub struct ConstantChatClient(String);

impl ChatClient for ConstantChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let n = request
            .prompt
            .split("JSON array of exactly ")
            .nth(1)
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| ClientError::Protocol("cannot find line count in prompt".into()))?;
        Ok(serde_json::to_string(&vec![self.0.as_str(); n]).expect("strings serialize"))
    }
}

/// Result of labeling one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub labels: Vec<String>,
    pub attempts: u32,
    /// Every attempt produced an unusable answer; all lines labeled Clean.
    pub failed_open: bool,
}

/// Send one batch, retrying unusable answers and transport failures up to
/// `max_retries` times. Unusable answers fail open to Clean; transport
/// failures are returned as errors.
pub fn label_batch<C: ChatClient + ?Sized>(
    client: &C,
    batch: &Batch,
    prompt: &str,
    model: &str,
    max_retries: u32,
) -> Result<BatchOutcome, LabelerError> {
    let key = batch.key();
    let mut last_parse_error = None;
    for attempt in 0..=max_retries {
        let request = ChatRequest {
            model: model.to_string(),
            prompt: prompt.to_string(),
            batch_key: key.clone(),
            attempt,
        };
        match client.complete(&request) {
            Ok(raw) => match parse_response(&raw, batch.len()) {
                Ok(labels) => {
                    return Ok(BatchOutcome {
                        labels,
                        attempts: attempt + 1,
                        failed_open: false,
                    })
                }
                Err(e) => {
                    log::debug!("batch {key} attempt {attempt}: {e}");
                    last_parse_error = Some(e);
                }
            },
            Err(e) if attempt < max_retries => {
                log::debug!("batch {key} attempt {attempt}: {e}");
            }
            Err(source) => {
                return Err(LabelerError::Endpoint {
                    batch: key,
                    attempts: attempt + 1,
                    source,
                })
            }
        }
    }
    log::warn!(
        "batch {key}: no usable answer after {} attempts ({}); labeling {} lines Clean",
        max_retries + 1,
        last_parse_error.map(|e| e.to_string()).unwrap_or_default(),
        batch.len()
    );
    Ok(BatchOutcome {
        labels: vec![CLEAN_LABEL.to_string(); batch.len()],
        attempts: max_retries + 1,
        failed_open: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    documents_done: usize,
    records_written: u64,
    batches_done: u64,
    failed_open_batches: Vec<String>,
    registry: LabelRegistry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRunSummary {
    pub documents: usize,
    pub lines: u64,
    pub batches: u64,
    pub failed_open_batches: Vec<String>,
    pub registry: LabelRegistry,
}

pub fn checkpoint_path(output: &Path) -> PathBuf {
    sibling(output, "checkpoint.json")
}

pub fn registry_path(output: &Path) -> PathBuf {
    sibling(output, "registry.json")
}

fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(suffix);
    output.with_file_name(name)
}

fn batch_rng(seed: u64, batch_seq: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch_seq);
    rng
}

/// Keep the first `records` lines of `path`, dropping any partial tail left
/// by an interrupted run.
fn truncate_records(path: &Path, records: u64) -> Result<(), LabelerError> {
    if !path.exists() {
        return Ok(());
    }
    let data = fs::read(path).map_err(io_err(path))?;
    let mut seen = 0u64;
    let mut keep = 0usize;
    if records > 0 {
        for (i, b) in data.iter().enumerate() {
            if *b == b'\n' {
                seen += 1;
                if seen == records {
                    keep = i + 1;
                    break;
                }
            }
        }
        if seen < records {
            return Err(LabelerError::Format {
                path: path.to_path_buf(),
                message: format!("checkpoint expects {records} records, file has {seen}"),
            });
        }
    }
    let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    file.set_len(keep as u64).map_err(io_err(path))
}

/// Label every line of `docs`, writing JSONL records to `output`.
///
/// Progress is checkpointed next to `output` every `checkpoint_every`
/// documents; a rerun with the same inputs resumes from the last checkpoint.
/// Batches are dispatched up to `max_concurrent_requests` at a time but
/// their answers are folded into the registry in dispatch order.
pub fn label_corpus<I, C>(
    docs: I,
    config: &LabelerConfig,
    client: &C,
    output: &Path,
) -> Result<LabelRunSummary, LabelerError>
where
    I: IntoIterator<Item = Result<Document, CorpusError>>,
    C: ChatClient + ?Sized,
{
    config.validate()?;
    let ckpt_path = checkpoint_path(output);
    let mut state = if ckpt_path.exists() {
        let text = fs::read_to_string(&ckpt_path).map_err(io_err(&ckpt_path))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| LabelerError::Format {
            path: ckpt_path.clone(),
            message: e.to_string(),
        })?;
        truncate_records(output, ckpt.records_written)?;
        log::info!(
            "resuming after {} documents ({} lines)",
            ckpt.documents_done,
            ckpt.records_written
        );
        ckpt
    } else {
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        File::create(output).map_err(io_err(output))?;
        Checkpoint {
            documents_done: 0,
            records_written: 0,
            batches_done: 0,
            failed_open_batches: Vec::new(),
            registry: LabelRegistry::new(),
        }
    };

    let mut docs = docs.into_iter();
    for _ in 0..state.documents_done {
        match docs.next() {
            Some(doc) => {
                doc?;
            }
            None => break,
        }
    }

    let mut chunk: Vec<Document> = Vec::with_capacity(config.checkpoint_every);
    loop {
        chunk.clear();
        for doc in docs.by_ref().take(config.checkpoint_every) {
            chunk.push(doc?);
        }
        if chunk.is_empty() {
            break;
        }
        let lines: Vec<LineRecord> = chunk
            .iter()
            .flat_map(|d| config.segmentation.split(d))
            .collect();
        let batches = make_batches(&lines, config.batch_lines);
        let mut records: Vec<LabeledLine> = Vec::with_capacity(lines.len());
        for wave in batches.chunks(config.max_concurrent_requests) {
            let prompts: Vec<String> = wave
                .iter()
                .map(|b| build_prompt(b, &state.registry))
                .collect();
            let outcomes: Vec<Result<BatchOutcome, LabelerError>> = if wave.len() == 1 {
                vec![label_batch(
                    client,
                    &wave[0],
                    &prompts[0],
                    &config.model_name,
                    config.max_retries,
                )]
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = wave
                        .iter()
                        .zip(&prompts)
                        .map(|(b, p)| {
                            s.spawn(move || {
                                label_batch(client, b, p, &config.model_name, config.max_retries)
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("labeling thread panicked"))
                        .collect()
                })
            };
            for (batch, outcome) in wave.iter().zip(outcomes) {
                let outcome = outcome?;
                if outcome.failed_open {
                    state.failed_open_batches.push(batch.key());
                }
                let assignments: Vec<LabelAssignment> = batch
                    .lines
                    .iter()
                    .zip(&outcome.labels)
                    .map(|(l, label)| LabelAssignment {
                        line: l.key(),
                        label: label.clone(),
                    })
                    .collect();
                let mut rng = batch_rng(config.rng_seed, state.batches_done);
                state.registry.ingest_assignments(&assignments, &mut rng);
                state.batches_done += 1;
                records.extend(batch.lines.iter().zip(outcome.labels).map(|(l, label)| {
                    LabeledLine {
                        line: l.clone(),
                        label,
                    }
                }));
            }
        }

        let file = OpenOptions::new()
            .append(true)
            .open(output)
            .map_err(io_err(output))?;
        let mut w = BufWriter::new(file);
        for r in &records {
            serde_json::to_writer(&mut w, r).expect("labeled lines serialize");
            w.write_all(b"\n").map_err(io_err(output))?;
        }
        let file = w.into_inner().map_err(|e| io_err(output)(e.into_error()))?;
        file.sync_all().map_err(io_err(output))?;

        state.documents_done += chunk.len();
        state.records_written += records.len() as u64;
        if state.registry.total() != state.records_written {
            return Err(LabelerError::Conservation {
                registry: state.registry.total(),
                lines: state.records_written,
            });
        }
        write_json_atomic(&ckpt_path, &state).map_err(io_err(&ckpt_path))?;
    }

    let reg_path = registry_path(output);
    write_json_atomic(&reg_path, &state.registry).map_err(io_err(&reg_path))?;
    Ok(LabelRunSummary {
        documents: state.documents_done,
        lines: state.records_written,
        batches: state.batches_done,
        failed_open_batches: state.failed_open_batches,
        registry: state.registry,
    })
}

/// Read a labels JSONL file.
pub fn read_labeled(path: &Path) -> Result<Vec<LabeledLine>, LabelerError> {
    crate::io::read_jsonl(path).map_err(|e| match e {
        crate::io::JsonlError::Io(source) => LabelerError::Io {
            path: path.to_path_buf(),
            source,
        },
        crate::io::JsonlError::Parse { line, message } => LabelerError::Format {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        },
    })
}

pub fn write_labeled(path: &Path, lines: &[LabeledLine]) -> Result<(), LabelerError> {
    let mut buf = Vec::new();
    for l in lines {
        serde_json::to_writer(&mut buf, l).expect("labeled lines serialize");
        buf.push(b'\n');
    }
    write_atomic(path, &buf).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_into_lines;

    fn batch(texts: &[&str]) -> Batch {
        let doc = Document::new("d", texts.join("\n"));
        Batch {
            doc_id: "d".into(),
            lines: split_into_lines(&doc),
        }
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(canonicalize_label("clean"), "Clean");
        assert_eq!(canonicalize_label(" CLEAN "), "Clean");
        assert_eq!(canonicalize_label("  Navigation\t Menu "), "navigation menu");
    }

    #[test]
    fn prompt_contents() {
        let b = batch(&["first line", "second line"]);
        let p = build_prompt(&b, &LabelRegistry::new());
        assert!(p.contains("1. first line"));
        assert!(p.contains("2. second line"));
        assert!(p.contains("- Clean\n"));
        assert!(p.contains("exactly 2 strings"));

        let reg = LabelRegistry::from_labels((0..49).map(|i| format!("label {i}")).collect::<Vec<_>>().iter().map(String::as_str));
        assert_eq!(reg.len(), 50);
        let p = build_prompt(&b, &reg);
        for (label, _) in reg.iter() {
            assert_eq!(p.matches(&format!("- {label}\n")).count(), 1, "{label}");
        }
    }

    #[test]
    fn shuffle_keeps_label_set() {
        let mut reg = LabelRegistry::from_labels(["a", "b", "c", "d", "e", "f"]);
        let before: BTreeSet<_> = reg.presentation_order().iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        reg.ingest_assignments(&[], &mut rng);
        let after: BTreeSet<_> = reg.presentation_order().iter().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn parse_valid_and_canonical() {
        let labels = parse_response(r#"["Clean","Clean","navigation menu"]"#, 3).unwrap();
        assert_eq!(labels, vec!["Clean", "Clean", "navigation menu"]);
        assert_eq!(parse_response(r#"["clean","CLEAN "]"#, 2).unwrap(), vec!["Clean", "Clean"]);
        let fenced = "Here you go:\n```json\n[\"Clean\", \"Spam Link\"]\n```";
        assert_eq!(parse_response(fenced, 2).unwrap(), vec!["Clean", "spam link"]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_response(r#"["Clean"]"#, 3),
            Err(ResponseError::CountMismatch { expected: 3, got: 1 })
        ));
        assert!(matches!(parse_response("no idea", 1), Err(ResponseError::Unparseable)));
        assert!(matches!(parse_response("[1, 2]", 2), Err(ResponseError::Unparseable)));
        assert!(matches!(parse_response(r#"["  "]"#, 1), Err(ResponseError::Unparseable)));
    }

    fn assign(labels: &[&str]) -> Vec<LabelAssignment> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| LabelAssignment {
                line: LineRef {
                    doc_id: "d".into(),
                    line_index: i,
                    segment_index: 0,
                },
                label: l.to_string(),
            })
            .collect()
    }

    #[test]
    fn ingest_counts() {
        let mut reg = LabelRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        reg.ingest_assignments(&assign(&["Clean"; 10]), &mut rng);
        reg.ingest_assignments(&assign(&["Clean", "spam link"]), &mut rng);
        assert_eq!(reg.count("Clean"), Some(11));
        assert_eq!(reg.count("spam link"), Some(1));
        assert_eq!(reg.len(), 2);

        let mut reg = LabelRegistry::new();
        reg.ingest_assignments(&assign(&["new one", "New  One"]), &mut rng);
        assert_eq!(reg.count("new one"), Some(2));
        assert_eq!(reg.presentation_order().len(), 2);
    }

    #[test]
    fn empty_ingest_reshuffles() {
        let names: Vec<String> = (0..20).map(|i| format!("l{i}")).collect();
        let mut reg = LabelRegistry::from_labels(names.iter().map(String::as_str));
        let before = reg.presentation_order().to_vec();
        let counts: Vec<_> = reg.iter().map(|(k, v)| (k.to_string(), v)).collect();
        reg.ingest_assignments(&[], &mut ChaCha8Rng::seed_from_u64(3));
        assert_ne!(before, reg.presentation_order());
        let after: Vec<_> = reg.iter().map(|(k, v)| (k.to_string(), v)).collect();
        assert_eq!(counts, after);
    }

    struct Flaky;
    impl ChatClient for Flaky {
        fn complete(&self, req: &ChatRequest) -> Result<String, ClientError> {
            if req.attempt == 0 {
                Ok(r#"["Clean"]"#.into())
            } else {
                Ok(r#"["Clean","ad banner"]"#.into())
            }
        }
    }

    #[test]
    fn retry_after_count_mismatch() {
        let b = batch(&["x", "y"]);
        let out = label_batch(&Flaky, &b, "p", "m", 2).unwrap();
        assert_eq!(out.attempts, 2);
        assert!(!out.failed_open);
        assert_eq!(out.labels, vec!["Clean", "ad banner"]);
    }

    #[test]
    fn fail_open_after_retries() {
        let b = batch(&["x", "y"]);
        let out = label_batch(&Flaky, &b, "p", "m", 0).unwrap();
        assert!(out.failed_open);
        assert_eq!(out.labels, vec!["Clean", "Clean"]);
    }

    #[test]
    fn transport_failure_aborts() {
        let client = MockChatClient::new([TranscriptEntry {
            batch: "*".into(),
            attempt: None,
            response: None,
            error: Some("connection refused".into()),
        }]);
        let b = batch(&["x"]);
        let err = label_batch(&client, &b, "p", "m", 2).unwrap_err();
        assert!(matches!(err, LabelerError::Endpoint { attempts: 3, .. }));
    }

    #[test]
    fn constant_client_answers_prompt_size() {
        let b = batch(&["a", "b", "c"]);
        let p = build_prompt(&b, &LabelRegistry::new());
        let raw = MockChatClient::constant("Clean")
            .complete(&ChatRequest {
                model: "m".into(),
                prompt: p,
                batch_key: b.key(),
                attempt: 0,
            })
            .unwrap();
        assert_eq!(parse_response(&raw, 3).unwrap().len(), 3);
    }

    #[test]
    fn request_body_shape() {
        let req = ChatRequest {
            model: "gpt-4o-mini".into(),
            prompt: "hi".into(),
            batch_key: "k".into(),
            attempt: 0,
        };
        let body = req.body();
        assert_eq!(body["model"], "gpt-4o-mini");
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["messages"][0]["content"], "hi");
    }
}
