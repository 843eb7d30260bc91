//! Query-term keep/drop classification with tag-graph attention.
//!
//! The core types are generic over the scalar; the aliases below fix the
//! two supported precisions.

pub mod model;
pub mod numerics;
pub mod querydata;
pub mod taggraph;
pub mod traineval;
mod util;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
pub type Tape32<'p> = numerics::GradientTape<'p, f32>;
pub type Tape64<'p> = numerics::GradientTape<'p, f64>;
