//! Annotation sessions and Cohen's kappa between human annotators and the
//! LLM-assigned categories.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, LineRef, LineSplitter};
use crate::taxonomy::{CategorizedLine, Category};

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("kappa needs at least one item")]
    Empty,
    #[error("no documents to sample from")]
    EmptySample,
    #[error("line {0} has no category")]
    Unlabeled(LineRef),
    #[error("item {index} out of range (session has {len} items)")]
    ItemOutOfRange { index: usize, len: usize },
    #[error("a disagreeing verdict needs a corrected label")]
    MissingCorrection,
    #[error("an agreeing verdict cannot carry a corrected label")]
    UnexpectedCorrection,
    #[error("session has no annotator verdicts")]
    NoAnnotators,
    #[error("incomplete session: {}", .0.iter().map(|(a, m)| format!("{a} missing items {m:?}")).collect::<Vec<_>>().join("; "))]
    Incomplete(Vec<(String, Vec<usize>)>),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

/// Cohen's kappa between two equally long label sequences. When chance
/// agreement is 1 (both sequences constant and identical) the formula is
/// undefined; this returns 1.0 if observed agreement is perfect and 0.0
/// otherwise.
pub fn cohens_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64, AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AgreementError::Empty);
    }
    let n = a.len() as f64;
    let mut marginals: BTreeMap<&T, (u64, u64)> = BTreeMap::new();
    let mut agree = 0u64;
    for (x, y) in a.iter().zip(b) {
        marginals.entry(x).or_default().0 += 1;
        marginals.entry(y).or_default().1 += 1;
        if x == y {
            agree += 1;
        }
    }
    let p_o = agree as f64 / n;
    let p_e = marginals
        .values()
        .map(|&(ca, cb)| ca as f64 * cb as f64)
        .sum::<f64>()
        / (n * n);
    if p_e >= 1.0 {
        log::debug!("degenerate kappa: chance agreement is 1");
        return Ok(if p_o >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Collapse categories to Clean vs Non-clean.
pub fn binarize(labels: &[Category]) -> Vec<bool> {
    labels.iter().map(|c| c.is_clean()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub line: LineRef,
    pub text: String,
    pub llm_label: Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorVerdict {
    pub agrees: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_label: Option<Category>,
}

impl AnnotatorVerdict {
    pub fn agree() -> Self {
        Self {
            agrees: true,
            corrected_label: None,
        }
    }

    pub fn disagree(corrected: Category) -> Self {
        Self {
            agrees: false,
            corrected_label: Some(corrected),
        }
    }

    pub fn validate(&self) -> Result<(), AgreementError> {
        match (self.agrees, self.corrected_label) {
            (true, Some(_)) => Err(AgreementError::UnexpectedCorrection),
            (false, None) => Err(AgreementError::MissingCorrection),
            _ => Ok(()),
        }
    }

    /// The annotator's category for an item the LLM labeled `llm`.
    pub fn label(&self, llm: Category) -> Category {
        self.corrected_label.unwrap_or(llm)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub session_id: String,
    pub items: Vec<AnnotationItem>,
    /// annotator id → item index → verdict
    #[serde(default)]
    pub verdicts: BTreeMap<String, BTreeMap<usize, AnnotatorVerdict>>,
}

/// One item per line of `docs`, in document order, carrying the line's
/// category from `labels`.
pub fn create_session(
    session_id: &str,
    docs: &[Document],
    labels: &[CategorizedLine],
    splitter: &LineSplitter,
) -> Result<AnnotationSession, AgreementError> {
    if docs.is_empty() {
        return Err(AgreementError::EmptySample);
    }
    let by_key: HashMap<LineRef, Category> = labels
        .iter()
        .map(|l| (l.line.key(), l.category))
        .collect();
    let mut items = Vec::new();
    for doc in docs {
        for rec in splitter.split(doc) {
            let key = rec.key();
            let Some(&llm_label) = by_key.get(&key) else {
                return Err(AgreementError::Unlabeled(key));
            };
            items.push(AnnotationItem {
                line: key,
                text: rec.text,
                llm_label,
            });
        }
    }
    Ok(AnnotationSession {
        session_id: session_id.to_string(),
        items,
        verdicts: BTreeMap::new(),
    })
}

impl AnnotationSession {
    /// Store a verdict, replacing any earlier one from the same annotator.
    /// Returns the replaced verdict.
    pub fn record_verdict(
        &mut self,
        annotator: &str,
        index: usize,
        verdict: AnnotatorVerdict,
    ) -> Result<Option<AnnotatorVerdict>, AgreementError> {
        if index >= self.items.len() {
            return Err(AgreementError::ItemOutOfRange {
                index,
                len: self.items.len(),
            });
        }
        verdict.validate()?;
        Ok(self
            .verdicts
            .entry(annotator.to_string())
            .or_default()
            .insert(index, verdict))
    }

    pub fn annotators(&self) -> impl Iterator<Item = &str> {
        self.verdicts.keys().map(String::as_str)
    }

    pub fn missing_items(&self, annotator: &str) -> Vec<usize> {
        let done = self.verdicts.get(annotator);
        (0..self.items.len())
            .filter(|i| done.is_none_or(|d| !d.contains_key(i)))
            .collect()
    }

    pub fn llm_labels(&self) -> Vec<Category> {
        self.items.iter().map(|i| i.llm_label).collect()
    }

    /// Annotator labels for every item: the LLM label where they agreed,
    /// their correction otherwise.
    pub fn annotator_labels(&self, annotator: &str) -> Result<Vec<Category>, AgreementError> {
        let missing = self.missing_items(annotator);
        if !missing.is_empty() {
            return Err(AgreementError::Incomplete(vec![(annotator.to_string(), missing)]));
        }
        let v = &self.verdicts[annotator];
        Ok(self
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| v[&i].label(item.llm_label))
            .collect())
    }

    /// Kappa against the LLM over the items this annotator has answered so
    /// far; `None` before the first verdict.
    pub fn answered_kappa(&self, annotator: &str) -> Option<f64> {
        let v = self.verdicts.get(annotator)?;
        let (llm, human): (Vec<Category>, Vec<Category>) = v
            .iter()
            .map(|(&i, verdict)| {
                let llm = self.items[i].llm_label;
                (llm, verdict.label(llm))
            })
            .unzip();
        cohens_kappa(&llm, &human).ok()
    }

    pub fn load(path: &Path) -> Result<Self, AgreementError> {
        crate::io::read_json(path).map_err(|e| AgreementError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AgreementError> {
        crate::io::write_json_atomic(path, self).map_err(|e| AgreementError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorKappa {
    pub annotator: String,
    pub full: f64,
    pub binary: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub session_id: String,
    pub items: usize,
    pub annotators: Vec<AnnotatorKappa>,
    pub average_full: f64,
    pub average_binary: f64,
}

impl AgreementReport {
    /// Rows per comparison, one column per annotator plus the average.
    pub fn table(&self) -> String {
        let mut out = format!("{:<22}", "");
        for a in &self.annotators {
            out.push_str(&format!("{:>8}", a.annotator));
        }
        out.push_str(&format!("{:>8}\n", "Avg"));
        for (name, pick, avg) in [
            ("Full label set", (|k: &AnnotatorKappa| k.full) as fn(&AnnotatorKappa) -> f64, self.average_full),
            ("Clean vs. Non-clean", |k: &AnnotatorKappa| k.binary, self.average_binary),
        ] {
            out.push_str(&format!("{name:<22}"));
            for a in &self.annotators {
                out.push_str(&format!("{:>8.2}", pick(a)));
            }
            out.push_str(&format!("{avg:>8.2}\n"));
        }
        out
    }
}

/// Kappa of every annotator against the LLM labels, on the full category
/// set and collapsed to Clean vs Non-clean.
pub fn agreement_report(session: &AnnotationSession) -> Result<AgreementReport, AgreementError> {
    if session.verdicts.is_empty() {
        return Err(AgreementError::NoAnnotators);
    }
    let incomplete: Vec<(String, Vec<usize>)> = session
        .annotators()
        .map(|a| (a.to_string(), session.missing_items(a)))
        .filter(|(_, m)| !m.is_empty())
        .collect();
    if !incomplete.is_empty() {
        return Err(AgreementError::Incomplete(incomplete));
    }
    let llm = session.llm_labels();
    let llm_bin = binarize(&llm);
    let mut annotators = Vec::new();
    for a in session.annotators() {
        let human = session.annotator_labels(a)?;
        annotators.push(AnnotatorKappa {
            annotator: a.to_string(),
            full: cohens_kappa(&llm, &human)?,
            binary: cohens_kappa(&llm_bin, &binarize(&human))?,
        });
    }
    let n = annotators.len() as f64;
    Ok(AgreementReport {
        session_id: session.session_id.clone(),
        items: session.items.len(),
        average_full: annotators.iter().map(|k| k.full).sum::<f64>() / n,
        average_binary: annotators.iter().map(|k| k.binary).sum::<f64>() / n,
        annotators,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LineRecord;
    use proptest::prelude::*;
    use Category::*;

    fn item(i: usize, c: Category) -> AnnotationItem {
        AnnotationItem {
            line: LineRef {
                doc_id: "d".into(),
                line_index: i,
                segment_index: 0,
            },
            text: format!("line {i}"),
            llm_label: c,
        }
    }

    fn session(labels: &[Category]) -> AnnotationSession {
        AnnotationSession {
            session_id: "s".into(),
            items: labels.iter().enumerate().map(|(i, c)| item(i, *c)).collect(),
            verdicts: BTreeMap::new(),
        }
    }

    /// Kappa from an explicit k×k contingency table.
    fn table_kappa(a: &[u8], b: &[u8]) -> f64 {
        let mut m = [[0f64; 9]; 9];
        for (x, y) in a.iter().zip(b) {
            m[*x as usize][*y as usize] += 1.0;
        }
        let n = a.len() as f64;
        let diag: f64 = (0..9).map(|k| m[k][k]).sum();
        let rows: Vec<f64> = (0..9).map(|k| m[k].iter().sum()).collect();
        let cols: Vec<f64> = (0..9).map(|k| (0..9).map(|r| m[r][k]).sum()).collect();
        let pe: f64 = (0..9).map(|k| rows[k] * cols[k]).sum::<f64>() / (n * n);
        let po = diag / n;
        if pe == 1.0 {
            return if po == 1.0 { 1.0 } else { 0.0 };
        }
        (po - pe) / (1.0 - pe)
    }

    #[test]
    fn hand_cases() {
        let c = "C";
        let n = "N";
        assert_eq!(cohens_kappa(&[c, c, n, n], &[c, n, n, n]).unwrap(), 0.5);
        assert_eq!(cohens_kappa(&[c, c, c], &[n, n, n]).unwrap(), 0.0);
        assert_eq!(cohens_kappa(&[c, n, c], &[c, n, c]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&[c], &[c]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&[c, c], &[c, c]).unwrap(), 1.0);
        assert!(matches!(cohens_kappa(&[c], &[c, n]), Err(AgreementError::LengthMismatch(1, 2))));
        assert!(matches!(cohens_kappa::<&str>(&[], &[]), Err(AgreementError::Empty)));
    }

    #[test]
    fn create_session_one_item_per_line() {
        let docs = vec![
            Document {
                id: "a".into(),
                text: "1\n2\n3".into(),
                meta: Default::default(),
            },
            Document {
                id: "b".into(),
                text: "1\n2\n3\n4".into(),
                meta: Default::default(),
            },
        ];
        let splitter = LineSplitter::default();
        let labels: Vec<CategorizedLine> = docs
            .iter()
            .flat_map(|d| splitter.split(d))
            .map(|line: LineRecord| CategorizedLine {
                line,
                label: "Clean".into(),
                category: Clean,
            })
            .collect();
        let s = create_session("s", &docs, &labels, &splitter).unwrap();
        assert_eq!(s.items.len(), 7);
        assert_eq!(s.items[3].line.doc_id, "b");
        assert!(s.verdicts.is_empty());
        assert!(matches!(
            create_session("s", &[], &labels, &splitter),
            Err(AgreementError::EmptySample)
        ));
        assert!(matches!(
            create_session("s", &docs, &labels[..6], &splitter),
            Err(AgreementError::Unlabeled(_))
        ));
    }

    #[test]
    fn verdict_rules() {
        let mut s = session(&[Clean, NavigationInterface]);
        assert_eq!(s.record_verdict("A1", 0, AnnotatorVerdict::agree()).unwrap(), None);
        s.record_verdict("A1", 1, AnnotatorVerdict::disagree(NavigationInterface))
            .unwrap();
        let bad = AnnotatorVerdict {
            agrees: false,
            corrected_label: None,
        };
        assert!(matches!(s.record_verdict("A1", 1, bad), Err(AgreementError::MissingCorrection)));
        assert!(s.record_verdict("A1", 2, AnnotatorVerdict::agree()).is_err());
        let prev = s.record_verdict("A1", 1, AnnotatorVerdict::agree()).unwrap();
        assert_eq!(prev, Some(AnnotatorVerdict::disagree(NavigationInterface)));
        assert_eq!(s.verdicts["A1"][&1], AnnotatorVerdict::agree());
    }

    #[test]
    fn report_full_agreement() {
        let mut s = session(&[Clean, Clean, FormattingStyleErrors, PromotionalSpam]);
        for i in 0..4 {
            s.record_verdict("A1", i, AnnotatorVerdict::agree()).unwrap();
        }
        let r = agreement_report(&s).unwrap();
        assert_eq!(r.annotators[0].full, 1.0);
        assert_eq!(r.annotators[0].binary, 1.0);
        assert!(r.table().contains("Clean vs. Non-clean"));
    }

    #[test]
    fn report_mixed() {
        let mut s = session(&[Clean, Clean, FormattingStyleErrors, FormattingStyleErrors]);
        s.record_verdict("A1", 0, AnnotatorVerdict::agree()).unwrap();
        s.record_verdict("A1", 1, AnnotatorVerdict::disagree(PromotionalSpam)).unwrap();
        s.record_verdict("A1", 2, AnnotatorVerdict::agree()).unwrap();
        s.record_verdict("A1", 3, AnnotatorVerdict::agree()).unwrap();
        let r = agreement_report(&s).unwrap();
        let llm: Vec<u8> = vec![0, 0, 1, 1];
        assert!((r.annotators[0].full - table_kappa(&llm, &[0, 3, 1, 1])).abs() < 1e-12);
        assert!((r.annotators[0].binary - 0.5).abs() < 1e-12);
    }

    #[test]
    fn incomplete_report_lists_missing() {
        let mut s = session(&[Clean, Clean, Clean]);
        s.record_verdict("A1", 1, AnnotatorVerdict::agree()).unwrap();
        match agreement_report(&s) {
            Err(AgreementError::Incomplete(m)) => assert_eq!(m, vec![("A1".to_string(), vec![0, 2])]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(agreement_report(&session(&[Clean])), Err(AgreementError::NoAnnotators)));
    }

    #[test]
    fn single_item_degenerate() {
        let mut s = session(&[Clean]);
        s.record_verdict("A1", 0, AnnotatorVerdict::agree()).unwrap();
        s.record_verdict("A2", 0, AnnotatorVerdict::disagree(LegalAdministrative)).unwrap();
        let r = agreement_report(&s).unwrap();
        assert_eq!(r.annotators[0].full, 1.0);
        assert_eq!(r.annotators[1].full, 0.0);
    }

    #[test]
    fn session_json_round_trip() {
        let mut s = session(&[Clean, TechnicalMetadata]);
        s.record_verdict("A2", 1, AnnotatorVerdict::disagree(Clean)).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: AnnotationSession = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn matches_contingency_oracle(pairs in proptest::collection::vec((0u8..9, 0u8..9), 1..50)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let k = cohens_kappa(&a, &b).unwrap();
            prop_assert!((k - table_kappa(&a, &b)).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&k));
            prop_assert!((k - cohens_kappa(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn relabeling_invariant(pairs in proptest::collection::vec((0u8..9, 0u8..9), 1..50), shift in 1u8..9) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let ra: Vec<u8> = a.iter().map(|x| (x + shift) % 9).collect();
            let rb: Vec<u8> = b.iter().map(|x| (x + shift) % 9).collect();
            prop_assert!((cohens_kappa(&a, &b).unwrap() - cohens_kappa(&ra, &rb).unwrap()).abs() < 1e-12);
        }
    }
}
