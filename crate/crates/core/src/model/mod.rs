//! Two-tower encoder: a standard transformer tower, a graph-masked tower
//! driven by a static or dynamic tag graph, fusion, and a token classifier.

mod batch;
mod checkpoint;
mod config;
mod forward;
pub mod params;
#[cfg(test)]
mod tests;

pub use batch::{encode_record, encode_tokens, Batch, EncodedQuery};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::{Fusion, GraphMode, ModelConfig};
pub use forward::{
    classify, dynamic_tag_graph, embed_inputs, forward_nodes, fuse, graph_masked_attention, right_tower_layer,
    softmax_rows, DynamicNodes, DynamicTrace, ForwardNodes, ForwardOptions, ForwardTrace, RightNodes, RightTrace,
};
pub use params::init_params;

use std::collections::HashSet;

use thiserror::Error;

use crate::numerics::{cross_entropy, GradientTape, NumericsError, ParamStore, Scalar, Tensor, LOG_FLOOR};
use crate::querydata::{QueryRecord, Vocab, LABEL_DROP, LABEL_KEEP};
use crate::taggraph::TagGraph;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what} id {id} out of range for a table of {rows} rows")]
    IdOutOfRange { what: String, id: usize, rows: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("attention row {row} has no neighbor")]
    EmptyNeighborhood { row: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Configuration, vocabulary, optional static graph and parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore<T>,
    graph: Option<TagGraph>,
    edge_ids: Option<HashSet<(usize, usize)>>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model. Static mode needs `graph` (it may have no edges).
    pub fn new(config: ModelConfig, vocab: Vocab, graph: Option<TagGraph>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config, vocab.num_tokens(), vocab.num_tags(), seed);
        Self::from_params(config, vocab, graph, params)
    }

    pub fn from_params(
        config: ModelConfig,
        vocab: Vocab,
        graph: Option<TagGraph>,
        params: ParamStore<T>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if config.graph == GraphMode::Static && graph.is_none() {
            return Err(ModelError::Config("static graph mode needs a tag graph".into()));
        }
        let expected = params::expected_shapes(&config, vocab.num_tokens(), vocab.num_tags());
        if expected.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == &shape[..] => {}
                Some(t) => {
                    return Err(ModelError::ShapeMismatch {
                        left: shape.clone(),
                        right: t.shape().to_vec(),
                    })
                }
                None => return Err(ModelError::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        let graph = if config.graph == GraphMode::Static { graph } else { None };
        let edge_ids = graph.as_ref().map(|g| g.id_edges(|t| vocab.tag_id_known(t)));
        Ok(Self {
            config,
            vocab,
            params,
            graph,
            edge_ids,
        })
    }

    pub fn graph(&self) -> Option<&TagGraph> {
        self.graph.as_ref()
    }

    pub fn encode(&self, record: &QueryRecord) -> Result<EncodedQuery, ModelError> {
        encode_record(record, &self.vocab, self.config.max_len)
    }

    pub fn batch(&self, queries: &[&EncodedQuery]) -> Result<Batch<T>, ModelError> {
        let edges = if self.config.graph == GraphMode::Static {
            self.edge_ids.as_ref()
        } else {
            None
        };
        Batch::new(queries, edges)
    }

    pub fn forward_batch(&self, batch: &Batch<T>, opts: ForwardOptions<'_>) -> Result<ForwardTrace<T>, ModelError> {
        let mut tape = GradientTape::new(&self.params);
        let nodes = forward_nodes(&mut tape, &self.config, batch, opts)?;
        Ok(ForwardTrace::capture(&tape, &nodes, batch.layout.clone()))
    }

    /// Trace of a single record.
    pub fn forward(&self, record: &QueryRecord) -> Result<ForwardTrace<T>, ModelError> {
        let q = self.encode(record)?;
        let batch = self.batch(&[&q])?;
        self.forward_batch(&batch, ForwardOptions::default())
    }

    /// Batch loss (mean over queries of each query's mean token loss) and
    /// the gradient of every parameter, in store order.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch<T>,
        opts: ForwardOptions<'_>,
    ) -> Result<(T, Vec<Tensor<T>>), ModelError> {
        if !batch.is_labeled() {
            return Err(ModelError::Config("loss needs labeled queries".into()));
        }
        let mut tape = GradientTape::new(&self.params);
        let nodes = forward_nodes(&mut tape, &self.config, batch, opts)?;
        let loss = tape.softmax_cross_entropy(nodes.logits, &batch.targets, &batch.row_weights, T::of(LOG_FLOOR));
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { index: 0 }.into());
        }
        let grads = tape.backward(loss);
        Ok((value, grads.dense(&self.params)))
    }

    pub fn loss(&self, batch: &Batch<T>) -> Result<T, ModelError> {
        if !batch.is_labeled() {
            return Err(ModelError::Config("loss needs labeled queries".into()));
        }
        let mut tape = GradientTape::new(&self.params);
        let nodes = forward_nodes(&mut tape, &self.config, batch, ForwardOptions::default())?;
        let loss = tape.softmax_cross_entropy(nodes.logits, &batch.targets, &batch.row_weights, T::of(LOG_FLOOR));
        Ok(tape.value(loss).data()[0])
    }

    /// Keep/drop labels for the real tokens of every query in `batch`.
    pub fn predict_batch(&self, batch: &Batch<T>, opts: ForwardOptions<'_>) -> Result<Vec<Vec<u8>>, ModelError> {
        let mut tape = GradientTape::new(&self.params);
        let nodes = forward_nodes(&mut tape, &self.config, batch, opts)?;
        Ok(decode_labels(tape.value(nodes.logits), &batch.layout))
    }

    /// Predicted labels for `records`, evaluated `batch_size` at a time.
    pub fn predict(&self, records: &[QueryRecord], batch_size: usize) -> Result<Vec<Vec<u8>>, ModelError> {
        let encoded = records.iter().map(|r| self.encode(r)).collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(records.len());
        for chunk in encoded.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedQuery> = chunk.iter().collect();
            let mut batch = self.batch(&refs)?;
            batch.targets.clear();
            out.extend(self.predict_batch(&batch, ForwardOptions::default())?);
        }
        Ok(out)
    }
}

/// Argmax over keep/drop for the tokens between CLS and SEP.
pub fn decode_labels<T: Scalar>(logits: &Tensor<T>, layout: &crate::numerics::SeqLayout) -> Vec<Vec<u8>> {
    let keep = (LABEL_KEEP - 1) as usize;
    let drop = (LABEL_DROP - 1) as usize;
    layout
        .segments()
        .map(|(start, len, _)| {
            (start + 1..start + len - 1)
                .map(|r| {
                    let row = logits.row(r);
                    if row[drop] > row[keep] {
                        LABEL_DROP
                    } else {
                        LABEL_KEEP
                    }
                })
                .collect()
        })
        .collect()
}

/// Mean token cross-entropy of each query, averaged over queries.
/// `labels[q]` holds the wrapped labels of query `q`.
pub fn loss_from_trace<T: Scalar>(trace: &ForwardTrace<T>, labels: &[Vec<u8>]) -> Result<T, ModelError> {
    if labels.len() != trace.num_queries() {
        return Err(ModelError::LengthMismatch {
            expected: trace.num_queries(),
            actual: labels.len(),
        });
    }
    let k = trace.probs.cols();
    let mut total = T::zero();
    for (q, l) in labels.iter().enumerate() {
        let p = trace.query_rows(&trace.probs, q);
        if l.len() != p.rows() {
            return Err(ModelError::LengthMismatch {
                expected: p.rows(),
                actual: l.len(),
            });
        }
        let mut c = Tensor::zeros(&[l.len(), k]);
        for (i, &label) in l.iter().enumerate() {
            if label == 0 || label as usize > k {
                return Err(ModelError::Config(format!("label {label} out of range")));
            }
            c.set(i, label as usize - 1, T::one());
        }
        total += cross_entropy(&p, &c)?;
    }
    Ok(total / T::of(labels.len() as f64))
}
