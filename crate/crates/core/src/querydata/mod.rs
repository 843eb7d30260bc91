//! Query records, label derivation, vocabularies, synthetic corpora and
//! dataset files.

mod io;
mod synth;
mod vocab;

pub use io::{read_dataset, read_dataset_from, split_records, write_dataset, write_dataset_to, Splits};
pub use synth::{
    generate_synthetic, CategoryConfig, DropRule, Placement, PoolConfig, RuleCondition, SynthConfig, TagConfig,
};
pub use vocab::{build_vocab, Vocab};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label of a wrapped special token (CLS/SEP).
pub const LABEL_SPECIAL: u8 = 1;
pub const LABEL_KEEP: u8 = 2;
pub const LABEL_DROP: u8 = 3;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum QueryDataError {
    #[error("target token `{token}` (position {position}) is not matched in the source")]
    NotSubsequence { token: String, position: usize },
    #[error("label {label} out of range 1..={classes}")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("{0}")]
    InvalidRecord(String),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("unsatisfiable config: {0}")]
    Unsatisfiable(String),
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One tagged query with its rewrite and per-token keep/drop labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub tags: Vec<String>,
    pub labels: Vec<u8>,
}

impl QueryRecord {
    /// Builds a record from source, target and tags, deriving labels.
    pub fn new(source: Vec<String>, target: Vec<String>, tags: Vec<String>) -> Result<Self, QueryDataError> {
        let labels = derive_labels(&source, &target)?;
        let record = Self {
            source,
            target,
            tags,
            labels,
        };
        record.validate()?;
        Ok(record)
    }

    /// Builds a record from source, tags and labels; the target is the kept
    /// tokens.
    pub fn from_labels(source: Vec<String>, tags: Vec<String>, labels: Vec<u8>) -> Result<Self, QueryDataError> {
        if labels.len() != source.len() {
            return Err(QueryDataError::InvalidRecord(format!(
                "{} labels for {} source tokens",
                labels.len(),
                source.len()
            )));
        }
        let target = source
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == LABEL_KEEP)
            .map(|(s, _)| s.clone())
            .collect();
        let record = Self {
            source,
            target,
            tags,
            labels,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Checks every record invariant, including label self-consistency.
    pub fn validate(&self) -> Result<(), QueryDataError> {
        let m = self.source.len();
        if m == 0 {
            return Err(QueryDataError::InvalidRecord("empty source".into()));
        }
        if self.tags.len() != m {
            return Err(QueryDataError::InvalidRecord(format!(
                "{} tags for {m} source tokens",
                self.tags.len()
            )));
        }
        if self.labels.len() != m {
            return Err(QueryDataError::InvalidRecord(format!(
                "{} labels for {m} source tokens",
                self.labels.len()
            )));
        }
        if self.target.is_empty() {
            return Err(QueryDataError::InvalidRecord("empty target".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l != LABEL_KEEP && l != LABEL_DROP) {
            return Err(QueryDataError::InvalidRecord(format!("label {l} not in {{2,3}}")));
        }
        let derived = derive_labels(&self.source, &self.target)?;
        if derived != self.labels {
            return Err(QueryDataError::InvalidRecord(
                "labels disagree with the target subsequence".into(),
            ));
        }
        Ok(())
    }
}

/// Greedy leftmost subsequence alignment: 2 for source tokens consumed by
/// the target, 3 for the rest.
pub fn derive_labels<S: AsRef<str>>(source: &[S], target: &[S]) -> Result<Vec<u8>, QueryDataError> {
    let mut j = 0;
    let labels = source
        .iter()
        .map(|s| {
            if j < target.len() && s.as_ref() == target[j].as_ref() {
                j += 1;
                LABEL_KEEP
            } else {
                LABEL_DROP
            }
        })
        .collect();
    if j < target.len() {
        return Err(QueryDataError::NotSubsequence {
            token: target[j].as_ref().to_string(),
            position: j,
        });
    }
    Ok(labels)
}

/// Indicator vector of length `k` with a one at `label - 1`.
pub fn one_hot(label: u8, k: usize) -> Result<Vec<u8>, QueryDataError> {
    if label == 0 || label as usize > k {
        return Err(QueryDataError::LabelOutOfRange { label, classes: k });
    }
    let mut v = vec![0; k];
    v[label as usize - 1] = 1;
    Ok(v)
}
