//! Training loops and the two detector topologies: one multi-class FCN, or
//! a leaf FCN whose components are cropped and classified.

mod config;
mod infer;
mod train;

pub use config::{ClassifierArch, PipelineConfig, PipelineMode, TrainConfig};
pub use infer::{
    decode_instances, evaluate_pipeline, ground_truth, occluded_split, Classifier, Detector, Pipeline, Segmenter,
    SingleStage, TwoStage, EVAL_CLASSES,
};
pub use train::{
    fit_classifier, label_map, predict_probabilities, split_crops, train_classifier, train_classifier_on_crops,
    train_segmenter, EpochMetrics, ModelCard, SegTarget, TrainOutcome,
};
