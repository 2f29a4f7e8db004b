pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod surgery;
pub mod synth;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
pub use data::{Annotation, Condition, DatasetManifest, Mask, RgbnImage, Split};
pub use eval::{EvalReport, InstancePrediction};
pub use models::{InitScheme, ModelSpec};
pub use pipeline::{ModelCard, PipelineConfig, TrainConfig};
pub use surgery::{ExpansionStrategy, WeightArchive};
pub use tensor::{ModelGraph, Tensor};
pub use transforms::ChannelPlan;
