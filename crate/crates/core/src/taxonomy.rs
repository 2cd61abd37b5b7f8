//! Label refinement and grouping of descriptive labels into the nine
//! line-quality categories.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LineRecord, LineRef};
use crate::labeler::{canonicalize_label, LabelRegistry, LabeledLine, CLEAN_LABEL};

/// The nine line-quality categories. Declaration order is the class order
/// used by the classifier, with Clean first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "Clean")]
    Clean,
    #[serde(rename = "Formatting, Style & Errors")]
    FormattingStyleErrors,
    #[serde(rename = "Bibliographical & Citation References")]
    BibliographicalCitation,
    #[serde(rename = "Promotional & Spam Content")]
    PromotionalSpam,
    #[serde(rename = "Contact & Identification Information")]
    ContactIdentification,
    #[serde(rename = "Navigation & Interface Elements")]
    NavigationInterface,
    #[serde(rename = "Technical Specifications & Metadata")]
    TechnicalMetadata,
    #[serde(rename = "Legal & Administrative Content")]
    LegalAdministrative,
    #[serde(rename = "Offensive or Inappropriate Content")]
    OffensiveInappropriate,
}

pub const NUM_CATEGORIES: usize = 9;

impl Category {
    pub const ALL: [Category; NUM_CATEGORIES] = [
        Category::Clean,
        Category::FormattingStyleErrors,
        Category::BibliographicalCitation,
        Category::PromotionalSpam,
        Category::ContactIdentification,
        Category::NavigationInterface,
        Category::TechnicalMetadata,
        Category::LegalAdministrative,
        Category::OffensiveInappropriate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Clean => "Clean",
            Category::FormattingStyleErrors => "Formatting, Style & Errors",
            Category::BibliographicalCitation => "Bibliographical & Citation References",
            Category::PromotionalSpam => "Promotional & Spam Content",
            Category::ContactIdentification => "Contact & Identification Information",
            Category::NavigationInterface => "Navigation & Interface Elements",
            Category::TechnicalMetadata => "Technical Specifications & Metadata",
            Category::LegalAdministrative => "Legal & Administrative Content",
            Category::OffensiveInappropriate => "Offensive or Inappropriate Content",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Self::ALL.get(i).copied()
    }

    pub fn is_clean(self) -> bool {
        self == Category::Clean
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown category {0:?}")]
pub struct UnknownCategory(pub String);

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        Category::ALL
            .into_iter()
            .find(|c| c.name().to_lowercase() == norm)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    UnknownCategory(#[from] UnknownCategory),
    #[error("labels not assigned to any category: {0:?}")]
    UnassignedLabel(Vec<String>),
    #[error("labels assigned to more than one category: {0:?}")]
    DuplicateAssignment(Vec<String>),
    #[error("\"Clean\" must map to the Clean category, found {0}")]
    CleanMisassigned(Category),
    #[error("verdicts reference labels that were never seen: {0:?}")]
    UnknownLabel(Vec<String>),
    #[error("line {line} has label {label:?} with no category")]
    Unmapped { line: LineRef, label: String },
}

/// Outcome of manually reviewing a sample of lines for one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictDecision {
    Keep,
    RemapToClean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub label: String,
    pub decision: VerdictDecision,
    #[serde(default)]
    pub evidence: Vec<LineRef>,
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
}

/// Relabel every line whose label has fewer than `min_count` lines as Clean
/// and drop those labels from the registry.
pub fn remap_infrequent(
    mut lines: Vec<LabeledLine>,
    mut registry: LabelRegistry,
    min_count: u64,
) -> (Vec<LabeledLine>, LabelRegistry) {
    assert!(min_count >= 1, "min_count must be at least 1");
    let infrequent: BTreeSet<String> = registry
        .iter()
        .filter(|(name, count)| *name != CLEAN_LABEL && *count < min_count)
        .map(|(name, _)| name.to_string())
        .collect();
    if infrequent.is_empty() {
        return (lines, registry);
    }
    for line in &mut lines {
        if infrequent.contains(&line.label) {
            line.label = CLEAN_LABEL.to_string();
        }
    }
    for label in &infrequent {
        registry.retire(label);
    }
    log::info!("remapped {} labels with < {min_count} lines to Clean", infrequent.len());
    (lines, registry)
}

/// Latest verdict per label. Ties on timestamp go to the
/// lexicographically greatest reviewer id.
pub fn effective_verdicts(verdicts: &[VerificationVerdict]) -> BTreeMap<String, &VerificationVerdict> {
    let mut out: BTreeMap<String, &VerificationVerdict> = BTreeMap::new();
    for v in verdicts {
        let label = canonicalize_label(&v.label);
        match out.get(&label) {
            Some(prev) if (prev.timestamp, &prev.reviewer) >= (v.timestamp, &v.reviewer) => {}
            _ => {
                out.insert(label, v);
            }
        }
    }
    out
}

/// Apply manual verification verdicts. Labels whose effective verdict is
/// `remap_to_clean` are folded into Clean; `keep` is a no-op. Verdicts on
/// labels already retired are no-ops, so applying the same verdicts twice
/// changes nothing.
pub fn apply_verdicts(
    mut lines: Vec<LabeledLine>,
    mut registry: LabelRegistry,
    verdicts: &[VerificationVerdict],
) -> Result<(Vec<LabeledLine>, LabelRegistry), TaxonomyError> {
    let effective = effective_verdicts(verdicts);
    let unknown: Vec<String> = effective
        .keys()
        .filter(|l| !registry.contains(l) && !registry.is_retired(l))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(TaxonomyError::UnknownLabel(unknown));
    }
    let remap: BTreeSet<&str> = effective
        .iter()
        .filter(|(label, v)| {
            v.decision == VerdictDecision::RemapToClean && registry.contains(label)
        })
        .map(|(label, _)| label.as_str())
        .collect();
    for line in &mut lines {
        if remap.contains(line.label.as_str()) {
            line.label = CLEAN_LABEL.to_string();
        }
    }
    for label in remap {
        registry.retire(label);
    }
    Ok((lines, registry))
}

/// Many-to-one map from descriptive labels to categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryScheme {
    mapping: HashMap<String, Category>,
}

impl CategoryScheme {
    pub fn categories(&self) -> &'static [Category; NUM_CATEGORIES] {
        &Category::ALL
    }

    pub fn category_of(&self, label: &str) -> Option<Category> {
        if label == CLEAN_LABEL {
            return Some(Category::Clean);
        }
        self.mapping.get(label).copied()
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    /// Build from `{category name: [labels]}` and check it covers every
    /// active label of `registry` exactly once.
    pub fn from_groups(
        groups: &BTreeMap<String, Vec<String>>,
        registry: &LabelRegistry,
    ) -> Result<Self, TaxonomyError> {
        let mut mapping: HashMap<String, Category> = HashMap::new();
        let mut duplicates = BTreeSet::new();
        for (cat_name, labels) in groups {
            let category: Category = cat_name.parse()?;
            for raw in labels {
                let label = canonicalize_label(raw);
                if label == CLEAN_LABEL && category != Category::Clean {
                    return Err(TaxonomyError::CleanMisassigned(category));
                }
                if let Some(prev) = mapping.insert(label.clone(), category) {
                    if prev != category {
                        duplicates.insert(label);
                    }
                }
            }
        }
        if !duplicates.is_empty() {
            return Err(TaxonomyError::DuplicateAssignment(duplicates.into_iter().collect()));
        }
        mapping.insert(CLEAN_LABEL.to_string(), Category::Clean);
        let unassigned: Vec<String> = registry
            .iter()
            .filter(|(label, _)| !mapping.contains_key(*label))
            .map(|(label, _)| label.to_string())
            .collect();
        if !unassigned.is_empty() {
            return Err(TaxonomyError::UnassignedLabel(unassigned));
        }
        Ok(Self { mapping })
    }
}

/// Load and validate a scheme file of the form `{category: [labels...]}`.
pub fn load_category_scheme(
    path: &Path,
    registry: &LabelRegistry,
) -> Result<CategoryScheme, TaxonomyError> {
    let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let groups: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| TaxonomyError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    CategoryScheme::from_groups(&groups, registry)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorizedLine {
    #[serde(flatten)]
    pub line: LineRecord,
    pub label: String,
    pub category: Category,
}

/// Line counts per category, in [`Category::ALL`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CategoryTally(pub [u64; NUM_CATEGORIES]);

impl CategoryTally {
    pub fn get(&self, c: Category) -> u64 {
        self.0[c.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn fraction(&self, c: Category) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.get(c) as f64 / total as f64
        }
    }

    pub fn from_lines<'a, I: IntoIterator<Item = &'a CategorizedLine>>(lines: I) -> Self {
        let mut t = Self::default();
        for l in lines {
            t.0[l.category.index()] += 1;
        }
        t
    }

    /// Table of category, line count and percentage.
    pub fn table(&self) -> String {
        let mut out = format!("{:<40} {:>10} {:>7}\n", "Category", "Lines", "%");
        for c in Category::ALL {
            out.push_str(&format!(
                "{:<40} {:>10} {:>7.2}\n",
                c.name(),
                self.get(c),
                100.0 * self.fraction(c)
            ));
        }
        out.push_str(&format!("{:<40} {:>10} {:>7}\n", "Total", self.total(), "100"));
        out
    }
}

impl Serialize for CategoryTally {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(NUM_CATEGORIES))?;
        for c in Category::ALL {
            m.serialize_entry(c.name(), &self.get(c))?;
        }
        m.end()
    }
}

/// Attach a category to every line.
pub fn categorize_corpus(
    lines: Vec<LabeledLine>,
    scheme: &CategoryScheme,
) -> Result<(Vec<CategorizedLine>, CategoryTally), TaxonomyError> {
    let mut tally = CategoryTally::default();
    let mut out = Vec::with_capacity(lines.len());
    for l in lines {
        let category = scheme
            .category_of(&l.label)
            .ok_or_else(|| TaxonomyError::Unmapped {
                line: l.line.key(),
                label: l.label.clone(),
            })?;
        tally.0[category.index()] += 1;
        out.push(CategorizedLine {
            line: l.line,
            label: l.label,
            category,
        });
    }
    Ok((out, tally))
}
