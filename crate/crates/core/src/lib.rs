//! Knowledge-guided bidirectional attention for human-object interaction
//! detection, on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod kb;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pairs;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{average_precision, evaluate, ApReport};
pub use fusion::{fuse, ScoredTriplet};
pub use kb::KnowledgeBase;
pub use model::{InferenceConfig, Model, ModelConfig};
pub use scene::{iou, position_code, BoundingBox, Instance, Scene};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use training::{TrainConfig, Trainer};
