pub mod backbone;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod geometry;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type PointCloud64 = geometry::PointCloud<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Model32 = pretrain::M3csModel<f32>;
pub type Model64 = pretrain::M3csModel<f64>;
pub type Pretrainer32 = pretrain::Pretrainer<f32>;
pub type Classifier32 = finetune::FinetuneModel<f32>;
pub type Classifier64 = finetune::FinetuneModel<f64>;
