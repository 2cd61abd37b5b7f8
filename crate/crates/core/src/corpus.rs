//! Document and line data model, JSONL ingestion, segmentation of long
//! lines and construction of labeling batches.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Longest segment (in characters) a line is split into.
pub const DEFAULT_MAX_SEGMENT_CHARS: usize = 200;

/// Maximum number of consecutive lines sent in one labeling request.
pub const DEFAULT_MAX_BATCH_LINES: usize = 15;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: record has no \"text\" field")]
    MissingText { path: PathBuf, line: usize },
    #[error("{path}:{line}: record has no \"id\" field")]
    MissingId { path: PathBuf, line: usize },
    #[error("{path}:{line}: duplicate document id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
}

impl CorpusError {
    /// 1-based line number in the input file, when the error has one.
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::Io { .. } => None,
            CorpusError::Malformed { line, .. }
            | CorpusError::MissingText { line, .. }
            | CorpusError::MissingId { line, .. }
            | CorpusError::DuplicateId { line, .. } => Some(*line),
        }
    }
}

/// A corpus document. Fields other than `id` and `text` found in the input
/// record are kept in `meta` and written back out unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(flatten)]
    pub meta: Map<String, Value>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            meta: Map::new(),
        }
    }

    /// A document with no text content at all.
    pub fn is_degenerate(&self) -> bool {
        self.text.trim().is_empty()
    }
}

/// Identifies one line (or one segment of a long line) inside a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineRef {
    pub doc_id: String,
    pub line_index: usize,
    pub segment_index: usize,
}

impl fmt::Display for LineRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.doc_id, self.line_index, self.segment_index)
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One line of a document, or one segment of a line longer than the
/// segment limit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineRecord {
    pub doc_id: String,
    pub line_index: usize,
    pub segment_index: usize,
    pub text: String,
    /// Set on a segment whose preceding split consumed a single space.
    #[serde(default, skip_serializing_if = "is_false")]
    pub follows_space: bool,
}

impl LineRecord {
    pub fn key(&self) -> LineRef {
        LineRef {
            doc_id: self.doc_id.clone(),
            line_index: self.line_index,
            segment_index: self.segment_index,
        }
    }
}

/// Up to [`DEFAULT_MAX_BATCH_LINES`] consecutive lines of a single document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub doc_id: String,
    pub lines: Vec<LineRecord>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Stable identifier: the key of the first line.
    pub fn key(&self) -> String {
        self.lines
            .first()
            .map(|l| l.key().to_string())
            .unwrap_or_else(|| format!("{}:empty", self.doc_id))
    }
}

/// Which lines are split into segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationScope {
    /// Every line longer than the limit.
    #[default]
    AllLongLines,
    /// Only documents that consist of a single over-long line.
    SingleLineDocuments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSplitter {
    pub max_segment_chars: usize,
    pub scope: SegmentationScope,
}

impl Default for LineSplitter {
    fn default() -> Self {
        Self {
            max_segment_chars: DEFAULT_MAX_SEGMENT_CHARS,
            scope: SegmentationScope::AllLongLines,
        }
    }
}

impl LineSplitter {
    /// Lines of `doc` with long lines segmented according to `scope`.
    pub fn split(&self, doc: &Document) -> Vec<LineRecord> {
        let lines = split_into_lines(doc);
        let segment = match self.scope {
            SegmentationScope::AllLongLines => true,
            SegmentationScope::SingleLineDocuments => lines.len() == 1,
        };
        if !segment {
            return lines;
        }
        let mut out = Vec::with_capacity(lines.len());
        for line in lines {
            if line.text.chars().count() <= self.max_segment_chars {
                out.push(line);
                continue;
            }
            for (segment_index, seg) in segment_line(&line.text, self.max_segment_chars)
                .into_iter()
                .enumerate()
            {
                out.push(LineRecord {
                    doc_id: line.doc_id.clone(),
                    line_index: line.line_index,
                    segment_index,
                    text: seg.text,
                    follows_space: seg.follows_space,
                });
            }
        }
        out
    }
}

/// Streaming reader over a JSONL corpus file.
pub struct DocumentReader<R> {
    path: PathBuf,
    lines: std::io::Lines<R>,
    line_no: usize,
    seen: HashSet<String>,
    failed: bool,
}

impl<R: BufRead> DocumentReader<R> {
    pub fn new(path: impl Into<PathBuf>, reader: R) -> Self {
        Self {
            path: path.into(),
            lines: reader.lines(),
            line_no: 0,
            seen: HashSet::new(),
            failed: false,
        }
    }

    fn parse(&mut self, raw: &str) -> Result<Document, CorpusError> {
        let line = self.line_no;
        let mut record: Map<String, Value> =
            serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
                path: self.path.clone(),
                line,
                message: e.to_string(),
            })?;
        let id = match record.remove("id") {
            Some(Value::String(s)) if !s.is_empty() => s,
            Some(Value::Number(n)) => n.to_string(),
            Some(other) if !other.is_null() => {
                return Err(CorpusError::Malformed {
                    path: self.path.clone(),
                    line,
                    message: format!("\"id\" must be a non-empty string, got {other}"),
                })
            }
            _ => {
                return Err(CorpusError::MissingId {
                    path: self.path.clone(),
                    line,
                })
            }
        };
        let text = match record.remove("text") {
            Some(Value::String(s)) => s,
            Some(other) => {
                return Err(CorpusError::Malformed {
                    path: self.path.clone(),
                    line,
                    message: format!("\"text\" must be a string, got {other}"),
                })
            }
            None => {
                return Err(CorpusError::MissingText {
                    path: self.path.clone(),
                    line,
                })
            }
        };
        if !self.seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: self.path.clone(),
                line,
                id,
            });
        }
        let doc = Document {
            id,
            text,
            meta: record,
        };
        if doc.is_degenerate() {
            log::warn!(
                "{}:{}: document {:?} has empty text",
                self.path.display(),
                line,
                doc.id
            );
        }
        Ok(doc)
    }
}

impl<R: BufRead> Iterator for DocumentReader<R> {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let raw = match self.lines.next()? {
                Ok(raw) => raw,
                Err(source) => {
                    self.failed = true;
                    return Some(Err(CorpusError::Io {
                        path: self.path.clone(),
                        source,
                    }));
                }
            };
            self.line_no += 1;
            if raw.trim().is_empty() {
                continue;
            }
            let res = self.parse(&raw);
            if res.is_err() {
                self.failed = true;
            }
            return Some(res);
        }
    }
}

/// Open a JSONL corpus for streaming. The stream ends after the first error.
pub fn load_documents(path: &Path) -> Result<DocumentReader<BufReader<File>>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(DocumentReader::new(path, BufReader::new(file)))
}

/// One record per non-empty newline-delimited line, trailing whitespace
/// trimmed, `segment_index` 0.
pub fn split_into_lines(doc: &Document) -> Vec<LineRecord> {
    doc.text
        .split('\n')
        .enumerate()
        .filter_map(|(line_index, raw)| {
            let text = raw.trim_end();
            if text.is_empty() {
                return None;
            }
            Some(LineRecord {
                doc_id: doc.id.clone(),
                line_index,
                segment_index: 0,
                text: text.to_string(),
                follows_space: false,
            })
        })
        .collect()
}

/// A piece of a long line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub text: String,
    /// The split before this segment consumed one space character.
    pub follows_space: bool,
}

fn is_sentence_end(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']')
}

/// Split `text` into pieces of at most `max_len` characters.
///
/// Each split falls right after the last sentence ender (`.`, `!`, `?`,
/// optionally followed by one of `"'])`) inside the current window that is
/// followed by whitespace. A single space after the split point is consumed.
/// Windows without such a boundary are cut hard at `max_len`.
pub fn segment_line(text: &str, max_len: usize) -> Vec<Segment> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut follows_space = false;
    while chars.len() - start > max_len {
        let window_end = start + max_len;
        let mut cut = None;
        // `end` is the exclusive end of the candidate segment.
        for end in (start + 1..=window_end).rev() {
            let last = chars[end - 1];
            let ends_sentence = is_sentence_end(last)
                || (is_closer(last) && end - 1 > start && is_sentence_end(chars[end - 2]));
            if ends_sentence && end < chars.len() && chars[end].is_whitespace() {
                cut = Some(end);
                break;
            }
        }
        let (end, next_start, consumed) = match cut {
            // Keep a trailing lone space as its own piece rather than dropping it.
            Some(end) if chars[end] == ' ' && end + 1 < chars.len() => (end, end + 1, true),
            Some(end) => (end, end, false),
            None => (window_end, window_end, false),
        };
        out.push(Segment {
            text: chars[start..end].iter().collect(),
            follows_space,
        });
        start = next_start;
        follows_space = consumed;
    }
    if start < chars.len() || out.is_empty() {
        out.push(Segment {
            text: chars[start..].iter().collect(),
            follows_space,
        });
    }
    out
}

/// Texts of [`segment_line`] with the default 200-character limit.
pub fn segment_long_line(text: &str) -> Vec<String> {
    segment_line(text, DEFAULT_MAX_SEGMENT_CHARS)
        .into_iter()
        .map(|s| s.text)
        .collect()
}

/// Inverse of [`segment_line`].
pub fn join_segments<'a, I>(segments: I) -> String
where
    I: IntoIterator<Item = (&'a str, bool)>,
{
    let mut out = String::new();
    for (text, follows_space) in segments {
        if follows_space {
            out.push(' ');
        }
        out.push_str(text);
    }
    out
}

/// Rebuild document text from its line records: segments of a line are
/// joined by their split rule, lines by `\n`. Records must be in order.
pub fn reconstruct_text(lines: &[LineRecord]) -> String {
    let mut out = String::new();
    let mut current: Option<usize> = None;
    for line in lines {
        match current {
            Some(idx) if idx == line.line_index => {
                if line.follows_space {
                    out.push(' ');
                }
            }
            Some(_) => out.push('\n'),
            None => {}
        }
        current = Some(line.line_index);
        out.push_str(&line.text);
    }
    out
}

/// Group ordered line records into batches of at most `max` lines that
/// never cross a document boundary.
pub fn make_batches(lines: &[LineRecord], max: usize) -> Vec<Batch> {
    assert!(max >= 1, "batch size must be at least 1");
    let mut batches = Vec::new();
    for doc_lines in lines.chunk_by(|a, b| a.doc_id == b.doc_id) {
        for chunk in doc_lines.chunks(max) {
            batches.push(Batch {
                doc_id: chunk[0].doc_id.clone(),
                lines: chunk.to_vec(),
            });
        }
    }
    batches
}

/// Document and line counts for a corpus file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub degenerate_documents: usize,
    pub lines: usize,
    pub segmented_lines: usize,
    pub records: usize,
    pub chars: usize,
}

pub fn corpus_stats<I>(docs: I, splitter: &LineSplitter) -> Result<CorpusStats, CorpusError>
where
    I: IntoIterator<Item = Result<Document, CorpusError>>,
{
    let mut stats = CorpusStats::default();
    for doc in docs {
        let doc = doc?;
        stats.documents += 1;
        if doc.is_degenerate() {
            stats.degenerate_documents += 1;
        }
        let records = splitter.split(&doc);
        stats.records += records.len();
        stats.chars += records.iter().map(|r| r.text.chars().count()).sum::<usize>();
        stats.lines += records.iter().filter(|r| r.segment_index == 0).count();
        stats.segmented_lines += records.iter().filter(|r| r.segment_index == 1).count();
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn reader(s: &str) -> DocumentReader<Cursor<Vec<u8>>> {
        DocumentReader::new("mem.jsonl", Cursor::new(s.as_bytes().to_vec()))
    }

    #[test]
    fn empty_file_is_empty_stream() {
        assert_eq!(reader("").count(), 0);
    }

    #[test]
    fn two_records_in_order() {
        let docs: Vec<_> = reader(
            "{\"id\":\"a\",\"text\":\"x\",\"url\":\"http://e\"}\n{\"id\":\"b\",\"text\":\"y\"}\n",
        )
        .collect::<Result<_, _>>()
        .unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].id, "a");
        assert_eq!(docs[1].id, "b");
        assert_eq!(docs[0].meta["url"], "http://e");
    }

    #[test]
    fn missing_text_names_line() {
        let input = "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"y\"}\n{\"id\":\"c\"}\n";
        let err = reader(input).find_map(|r| r.err()).unwrap();
        assert!(matches!(err, CorpusError::MissingText { line: 3, .. }));
        assert!(err.to_string().contains(":3:"));
    }

    #[test]
    fn duplicate_and_malformed_records() {
        let err = reader("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n")
            .find_map(|r| r.err())
            .unwrap();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, .. }));
        let err = reader("{not json}\n").find_map(|r| r.err()).unwrap();
        assert_eq!(err.line(), Some(1));
    }

    #[test]
    fn lines_split_and_empty_dropped() {
        let recs = split_into_lines(&Document::new("d", "a\nb\nc"));
        assert_eq!(
            recs.iter().map(|r| r.line_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        let recs = split_into_lines(&Document::new("d", "a\n\nb"));
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].line_index, 2);
        assert!(split_into_lines(&Document::new("d", "")).is_empty());
        let recs = split_into_lines(&Document::new("d", "a  \r\n  \n b"));
        assert_eq!(recs[0].text, "a");
        assert_eq!(recs[1].text, " b");
    }

    #[test]
    fn short_line_unchanged() {
        let line = "x".repeat(150);
        assert_eq!(segment_long_line(&line), vec![line]);
    }

    #[test]
    fn splits_after_sentence_end() {
        let line = format!("{}. {}", "A".repeat(180), "B".repeat(150));
        assert_eq!(line.chars().count(), 332);
        let segs = segment_line(&line, 200);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].text, format!("{}.", "A".repeat(180)));
        assert_eq!(segs[1].text, "B".repeat(150));
        assert!(segs[1].follows_space);
        let joined = join_segments(segs.iter().map(|s| (s.text.as_str(), s.follows_space)));
        assert_eq!(joined, line);
    }

    #[test]
    fn hard_split_without_punctuation() {
        let line = "q".repeat(410);
        let lens: Vec<_> = segment_long_line(&line).iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![200, 200, 10]);
    }

    #[test]
    fn closing_quote_stays_with_sentence() {
        let line = format!("{}?\" {}", "a".repeat(10), "b".repeat(20));
        let segs = segment_line(&line, 15);
        assert_eq!(segs[0].text, format!("{}?\"", "a".repeat(10)));
        assert_eq!(segs[1].text, "b".repeat(15));
    }

    #[test]
    fn decimal_points_are_not_boundaries() {
        let line = format!("{} 3.14 {}", "a".repeat(5), "b".repeat(20));
        let segs = segment_line(&line, 12);
        assert_eq!(segs[0].text.chars().count(), 12);
        assert!(!segs[1].follows_space);
    }

    #[test]
    fn batching() {
        let doc = |id: &str, n: usize| -> Vec<LineRecord> {
            (0..n)
                .map(|i| LineRecord {
                    doc_id: id.into(),
                    line_index: i,
                    segment_index: 0,
                    text: format!("l{i}"),
                    follows_space: false,
                })
                .collect()
        };
        let sizes = |b: &[Batch]| b.iter().map(Batch::len).collect::<Vec<_>>();
        assert_eq!(sizes(&make_batches(&doc("a", 31), 15)), vec![15, 15, 1]);
        let mut lines = doc("a", 10);
        lines.extend(doc("b", 3));
        let b = make_batches(&lines, 15);
        assert_eq!(sizes(&b), vec![10, 3]);
        assert_eq!(b[1].doc_id, "b");
        assert!(make_batches(&[], 15).is_empty());
    }

    #[test]
    fn splitter_scope() {
        let long = format!("{}. {}", "A".repeat(180), "B".repeat(150));
        let single = Document::new("s", long.clone());
        let multi = Document::new("m", format!("short\n{long}"));
        let single_only = LineSplitter {
            scope: SegmentationScope::SingleLineDocuments,
            ..LineSplitter::default()
        };
        assert_eq!(single_only.split(&single).len(), 2);
        assert_eq!(single_only.split(&multi).len(), 2);
        assert_eq!(LineSplitter::default().split(&multi).len(), 3);
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                6 => proptest::char::range('a', 'z'),
                2 => Just(' '),
                1 => prop_oneof![Just('.'), Just('!'), Just('?')],
                1 => prop_oneof![Just('"'), Just(')'), Just('\''), Just(']')],
                1 => prop_oneof![Just('é'), Just('日'), Just('\t'), Just('\n')],
            ],
            0..600,
        )
        .prop_map(|cs| cs.into_iter().collect())
    }

    proptest! {
        #[test]
        fn segments_bounded_and_lossless(text in text_strategy(), max_len in 1usize..250) {
            let segs = segment_line(&text, max_len);
            for s in &segs {
                prop_assert!(s.text.chars().count() <= max_len);
            }
            let joined = join_segments(segs.iter().map(|s| (s.text.as_str(), s.follows_space)));
            prop_assert_eq!(joined, text);
        }

        #[test]
        fn document_round_trip(text in text_strategy()) {
            let doc = Document::new("d", text.clone());
            let recs = LineSplitter::default().split(&doc);
            let expected: Vec<&str> = text
                .split('\n')
                .map(str::trim_end)
                .filter(|l| !l.is_empty())
                .collect();
            prop_assert_eq!(reconstruct_text(&recs), expected.join("\n"));
            for r in &recs {
                prop_assert!(!r.text.contains('\n'));
            }
        }

        #[test]
        fn batches_partition_input(sizes in proptest::collection::vec(0usize..40, 0..6), max in 1usize..20) {
            let mut lines = Vec::new();
            for (d, n) in sizes.iter().enumerate() {
                for i in 0..*n {
                    lines.push(LineRecord {
                        doc_id: format!("d{d}"),
                        line_index: i,
                        segment_index: 0,
                        text: String::new(),
                        follows_space: false,
                    });
                }
            }
            let batches = make_batches(&lines, max);
            let flat: Vec<_> = batches.iter().flat_map(|b| b.lines.clone()).collect();
            prop_assert_eq!(flat, lines);
            for b in &batches {
                prop_assert!(!b.is_empty() && b.len() <= max);
                prop_assert!(b.lines.iter().all(|l| l.doc_id == b.doc_id));
            }
        }
    }
}
