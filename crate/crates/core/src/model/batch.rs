use std::collections::HashSet;
use std::rc::Rc;

use super::ModelError;
use crate::numerics::{Scalar, SeqLayout, Tensor};
use crate::querydata::{QueryRecord, Vocab, LABEL_SPECIAL};
use crate::taggraph::query_adjacency_ids;

/// A query mapped to ids and wrapped as CLS + tokens + SEP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedQuery {
    pub tokens: Vec<usize>,
    pub tags: Vec<usize>,
    /// Wrapped labels (1 at both ends); empty when unlabeled.
    pub labels: Vec<u8>,
}

impl EncodedQuery {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn encode_tokens<S: AsRef<str>>(
    tokens: &[S],
    tags: &[S],
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedQuery, ModelError> {
    if tokens.len() != tags.len() {
        return Err(ModelError::LengthMismatch {
            expected: tokens.len(),
            actual: tags.len(),
        });
    }
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let len = tokens.len() + 2;
    if len > max_len {
        return Err(ModelError::TooLong { len, max_len });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(Vocab::CLS);
    ids.extend(tokens.iter().map(|t| vocab.token_id(t.as_ref())));
    ids.push(Vocab::SEP);
    let mut tag_ids = Vec::with_capacity(len);
    tag_ids.push(Vocab::TAG_NONE);
    tag_ids.extend(tags.iter().map(|t| vocab.tag_id(t.as_ref())));
    tag_ids.push(Vocab::TAG_NONE);
    Ok(EncodedQuery {
        tokens: ids,
        tags: tag_ids,
        labels: Vec::new(),
    })
}

pub fn encode_record(record: &QueryRecord, vocab: &Vocab, max_len: usize) -> Result<EncodedQuery, ModelError> {
    let mut q = encode_tokens(&record.source, &record.tags, vocab, max_len)?;
    q.labels.push(LABEL_SPECIAL);
    q.labels.extend_from_slice(&record.labels);
    q.labels.push(LABEL_SPECIAL);
    Ok(q)
}

/// Several queries packed back to back without padding.
pub struct Batch<T> {
    pub layout: Rc<SeqLayout>,
    pub token_ids: Vec<usize>,
    pub type_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub tag_ids: Vec<usize>,
    /// Static 0/1 adjacency blocks, one `len x len` block per query.
    pub adjacency: Option<Tensor<T>>,
    /// Class index (label - 1) per row; empty when any query is unlabeled.
    pub targets: Vec<usize>,
    /// `1 / (queries * len)` per row: the loss averages each query's mean.
    pub row_weights: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    /// Packs `queries`; `edges` (tag-id pairs, both orientations) switches
    /// on static adjacency.
    pub fn new(queries: &[&EncodedQuery], edges: Option<&HashSet<(usize, usize)>>) -> Result<Self, ModelError> {
        if queries.is_empty() || queries.iter().any(|q| q.is_empty()) {
            return Err(ModelError::EmptyInput);
        }
        let lens: Vec<usize> = queries.iter().map(|q| q.len()).collect();
        let layout = Rc::new(SeqLayout::new(&lens));
        let mut token_ids = Vec::with_capacity(layout.rows());
        let mut tag_ids = Vec::with_capacity(layout.rows());
        let mut positions = Vec::with_capacity(layout.rows());
        let mut targets = Vec::with_capacity(layout.rows());
        let mut row_weights = Vec::with_capacity(layout.rows());
        let labeled = queries.iter().all(|q| q.labels.len() == q.len());
        let nq = T::of(queries.len() as f64);
        for q in queries {
            if q.tags.len() != q.len() {
                return Err(ModelError::LengthMismatch {
                    expected: q.len(),
                    actual: q.tags.len(),
                });
            }
            token_ids.extend_from_slice(&q.tokens);
            tag_ids.extend_from_slice(&q.tags);
            positions.extend(0..q.len());
            let w = T::one() / (nq * T::of(q.len() as f64));
            row_weights.extend(std::iter::repeat_n(w, q.len()));
            if labeled {
                targets.extend(q.labels.iter().map(|&l| l as usize - 1));
            }
        }
        let adjacency = match edges {
            Some(edges) => {
                let mut cells = Vec::with_capacity(layout.block_len());
                for q in queries {
                    let a = query_adjacency_ids(&q.tags, edges);
                    cells.extend(a.cells().iter().map(|&c| if c != 0 { T::one() } else { T::zero() }));
                }
                Some(Tensor::new(vec![layout.block_len()], cells)?)
            }
            None => None,
        };
        Ok(Self {
            type_ids: vec![0; layout.rows()],
            layout,
            token_ids,
            positions,
            tag_ids,
            adjacency,
            targets,
            row_weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.layout.rows()
    }

    pub fn is_labeled(&self) -> bool {
        self.targets.len() == self.rows()
    }
}
