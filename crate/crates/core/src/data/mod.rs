//! Annotations, snippet feature files and synthetic datasets.

pub mod annotation;
pub mod dataset;
pub mod features;
pub mod synth;

pub use annotation::{
    load_annotations, parse_annotations, rescale_action, rescaled_actions, save_annotations, Action,
    VideoAnnotation,
};
pub use dataset::{load_dataset, save_dataset, ANNOTATIONS_FILE, FEATURES_DIR};
pub use features::{
    feature_path, load_features, save_features, EntityRows, SnippetBundle, VideoFeatureSequence,
};
pub use synth::{synth_generate, SynthSpec};
