use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::numerics::{ParamStore, Scalar, Tensor};
use crate::querydata::Vocab;
use crate::taggraph::TagGraph;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor<T> {
    name: String,
    shape: Vec<usize>,
    data: Vec<T>,
}

/// On-disk model: JSON with the config, vocabulary, static graph (TSV
/// text) and every named parameter tensor.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub scalar: String,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub graph: Option<String>,
    params: Vec<NamedTensor<T>>,
}

impl<T: Scalar + Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn from_model(model: &Model<T>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            scalar: T::NAME.to_string(),
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            graph: model.graph().map(TagGraph::to_tsv),
            params: model
                .params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model<T>, ModelError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.scalar != T::NAME {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds {} parameters, requested {}",
                self.scalar,
                T::NAME
            )));
        }
        let graph = self
            .graph
            .as_deref()
            .map(TagGraph::from_tsv)
            .transpose()
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut params = ParamStore::new();
        for p in self.params {
            if params.get(&p.name).is_some() {
                return Err(ModelError::Checkpoint(format!("duplicate parameter `{}`", p.name)));
            }
            let t = Tensor::new(p.shape, p.data).map_err(|e| ModelError::Checkpoint(format!("`{}`: {e}", p.name)))?;
            params.insert(p.name, t);
        }
        Model::from_params(self.config, self.vocab, graph, params)
    }
}

pub fn save_checkpoint<T>(model: &Model<T>, path: impl AsRef<Path>) -> Result<(), ModelError>
where
    T: Scalar + Serialize + DeserializeOwned,
{
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Checkpoint::from_model(model)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T>(path: impl AsRef<Path>) -> Result<Model<T>, ModelError>
where
    T: Scalar + Serialize + DeserializeOwned,
{
    let ckpt: Checkpoint<T> = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    ckpt.into_model()
}
