use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainEvalError;
use crate::querydata::{QueryRecord, LABEL_DROP, LABEL_KEEP};

/// Counts over keep/drop: `counts[truth][pred]`, index 0 = keep, 1 = drop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    fn index(label: u8) -> Result<usize, TrainEvalError> {
        match label {
            LABEL_KEEP => Ok(0),
            LABEL_DROP => Ok(1),
            other => Err(TrainEvalError::BadLabel(other)),
        }
    }

    pub fn add(&mut self, truth: u8, pred: u8) -> Result<(), TrainEvalError> {
        self.counts[Self::index(truth)?][Self::index(pred)?] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    /// F1 of class `c` as `2tp / (2tp + fp + fn)`; 1 when the class is
    /// absent from both truth and predictions.
    pub fn f1(&self, c: usize) -> f64 {
        let tp = self.counts[c][c];
        let fp = self.counts[1 - c][c];
        let fn_ = self.counts[c][1 - c];
        if tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    }

    pub fn macro_f1(&self) -> f64 {
        (self.f1(0) + self.f1(1)) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthMetrics {
    pub queries: usize,
    pub tokens: u64,
    pub f1: f64,
    pub exact_match: f64,
    pub token_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Macro-F1 over keep and drop.
    pub f1: f64,
    pub f1_keep: f64,
    pub f1_drop: f64,
    pub exact_match: f64,
    pub token_acc: f64,
    pub queries: usize,
    pub tokens: u64,
    /// Keyed by source word count.
    pub per_length: BTreeMap<usize, LengthMetrics>,
    pub confusion: Confusion,
}

#[derive(Default)]
struct Tally {
    confusion: Confusion,
    queries: usize,
    exact: usize,
}

impl Tally {
    fn summary(&self) -> LengthMetrics {
        LengthMetrics {
            queries: self.queries,
            tokens: self.confusion.total(),
            f1: self.confusion.macro_f1(),
            exact_match: self.exact as f64 / self.queries as f64,
            token_acc: self.confusion.correct() as f64 / self.confusion.total() as f64,
        }
    }
}

/// Scores predicted label sequences against the records' labels.
pub fn evaluate_predictions(records: &[QueryRecord], predictions: &[Vec<u8>]) -> Result<MetricsReport, TrainEvalError> {
    if records.is_empty() {
        return Err(TrainEvalError::Empty);
    }
    if records.len() != predictions.len() {
        return Err(TrainEvalError::LengthMismatch {
            expected: records.len(),
            actual: predictions.len(),
        });
    }
    let mut all = Tally::default();
    let mut by_len: BTreeMap<usize, Tally> = BTreeMap::new();
    for (r, p) in records.iter().zip(predictions) {
        if r.labels.len() != p.len() {
            return Err(TrainEvalError::LengthMismatch {
                expected: r.labels.len(),
                actual: p.len(),
            });
        }
        let bucket = by_len.entry(r.len()).or_default();
        for (&t, &q) in r.labels.iter().zip(p) {
            all.confusion.add(t, q)?;
            bucket.confusion.add(t, q)?;
        }
        let exact = r.labels == *p;
        for t in [&mut all, bucket] {
            t.queries += 1;
            t.exact += exact as usize;
        }
    }
    let s = all.summary();
    Ok(MetricsReport {
        f1: s.f1,
        f1_keep: all.confusion.f1(0),
        f1_drop: all.confusion.f1(1),
        exact_match: s.exact_match,
        token_acc: s.token_acc,
        queries: s.queries,
        tokens: s.tokens,
        per_length: by_len.iter().map(|(&l, t)| (l, t.summary())).collect(),
        confusion: all.confusion,
    })
}

impl MetricsReport {
    /// `length,queries,tokens,f1,exact_match,token_acc` rows.
    pub fn per_length_csv(&self) -> String {
        let mut s = String::from("length,queries,tokens,f1,exact_match,token_acc\n");
        for (l, m) in &self.per_length {
            s.push_str(&format!(
                "{l},{},{},{:.6},{:.6},{:.6}\n",
                m.queries, m.tokens, m.f1, m.exact_match, m.token_acc
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(labels: &[u8]) -> QueryRecord {
        let src: Vec<String> = (0..labels.len()).map(|i| format!("w{i}")).collect();
        QueryRecord::from_labels(src, vec!["t".into(); labels.len()], labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let records = [rec(&[2, 3]), rec(&[2, 2, 3])];
        let preds: Vec<Vec<u8>> = records.iter().map(|r| r.labels.clone()).collect();
        let m = evaluate_predictions(&records, &preds).unwrap();
        assert_eq!((m.f1, m.exact_match, m.token_acc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn one_wrong_token() {
        let records = [rec(&[2, 3]), rec(&[2, 2])];
        let preds = vec![vec![2, 3], vec![2, 3]];
        let m = evaluate_predictions(&records, &preds).unwrap();
        assert_eq!(m.token_acc, 0.75);
        assert_eq!(m.exact_match, 0.5);
        assert_eq!(m.confusion.counts, [[2, 1], [0, 1]]);
        // keep: tp 2, fp 0, fn 1 -> 0.8; drop: tp 1, fp 1, fn 0 -> 2/3
        assert!((m.f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(m.per_length[&2].queries, 2);
    }

    #[test]
    fn errors() {
        assert!(evaluate_predictions(&[], &[]).is_err());
        assert!(evaluate_predictions(&[rec(&[2, 2])], &[vec![2]]).is_err());
        assert!(evaluate_predictions(&[rec(&[2, 2])], &[vec![2, 1]]).is_err());
    }
}
