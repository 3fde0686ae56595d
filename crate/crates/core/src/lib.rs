//! Relevance decomposition for sequential convolutional networks.
//!
//! The pipeline is: load a model ([`model_io::load_model`]), run
//! [`forward::forward`] to record activations, decompose the target logit
//! with [`attribution::lrp_backward`] or [`attribution::rap_backward`] (or
//! build a [`attribution::cam_heatmap`]), then turn the input relevance into a
//! [`evaluation::Heatmap`] and score it against bounding boxes.

pub mod attribution;
pub mod dump;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod forward;
pub mod model_io;
pub mod tensor;

pub use attribution::{
    attribute, cam_feature_map, cam_heatmap, check_alpha_beta, conservation_report, lrp_backward,
    lrp_backward_with, rap_backward, rap_backward_with, rap_layer_backward, rap_layer_backward_with,
    rap_normalize_penultimate, rap_uniform_shift, uniform_shift_values, ConservationReport, Method,
    PropagationConfig, RelevanceMap,
};
pub use error::{Error, Result};
pub use evaluation::{
    binarize, evaluate_dataset, iou, overlap_counts, postprocess_relevance, render_heatmap, BitMask,
    EvalCell, EvalOptions, EvalReport, Heatmap, TargetMode,
};
pub use forward::{forward, predict, ActivationTrace};
pub use model_io::{
    load_dataset_manifest, load_image, load_image_raw, load_model, save_model, BoundingBox, Conv2d, Dense,
    Layer, ModelGraph, Pool2d, Preprocessing, Sample,
};
pub use tensor::{bilinear_resize, split_pos_neg, sum_all, Shape, Tensor};
