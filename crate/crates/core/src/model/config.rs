use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::querydata::NUM_CLASSES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Gated,
    Mean,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    #[default]
    Static,
    Dynamic,
    /// Left tower only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub num_classes: usize,
    /// Longest wrapped sequence (CLS + tokens + SEP).
    pub max_len: usize,
    pub fusion: Fusion,
    pub graph: GraphMode,
    pub eps: f64,
    pub dropout: f64,
    pub right_layers: usize,
    pub right_heads: usize,
    /// Width of the dynamic branch's tag embeddings.
    pub tag_dim: usize,
    /// One gate value per token instead of one per dimension.
    pub scalar_gate: bool,
    pub init_std: f64,
    pub type_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            num_classes: NUM_CLASSES,
            max_len: 64,
            fusion: Fusion::Gated,
            graph: GraphMode::Static,
            eps: 1e-5,
            dropout: 0.0,
            right_layers: 1,
            right_heads: 1,
            tag_dim: 64,
            scalar_gate: false,
            init_std: 0.02,
            type_vocab: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.d_ff == 0 || self.tag_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.right_heads == 0 || !self.d_model.is_multiple_of(self.right_heads) {
            return bad("d_model must be divisible by right_heads");
        }
        if self.num_classes != NUM_CLASSES {
            return bad("num_classes must be 3");
        }
        if self.max_len < 3 {
            return bad("max_len must allow CLS, one token and SEP");
        }
        if self.right_layers == 0 && self.graph != GraphMode::None {
            return bad("graph-aware models need at least one right-tower layer");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.init_std > 0.0) || self.type_vocab == 0 {
            return bad("init_std and type_vocab must be positive");
        }
        Ok(())
    }

    /// Whether the right tower and the fusion step run.
    pub fn two_tower(&self) -> bool {
        self.graph != GraphMode::None
    }
}
