//! Person re-identification by relative-distance metric learning.
//!
//! A small convolutional network maps images to unit-norm embeddings. Training
//! minimizes a hinge on `||F(q) - F(m)||² - ||F(q) - F(x)||²` over triplets,
//! with the gradient computed once per distinct image rather than once per
//! triplet member.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use data::{
    augment_crop, load_dataset, prepare_input, save_dataset, split_train_test, synth_dataset, AugmentConfig,
    ClassId, Dataset, LabeledImage, SynthSpec,
};
pub use error::{Error, Result};
pub use eval::{average_trials, cmc, extract_embeddings, make_split, CmcCurve, CmcSummary, GalleryProbeSplit};
pub use loss::{distance_diff, objective, output_gradients, ImageId, ImageTable, LossConfig, Triplet};
pub use nn::{init_params, ArchitectureConfig, Embedding, Network, NetworkParams, ParamGroup};
pub use tensor::Tensor;
pub use train::{
    image_based_gradient, sgd_update, train_batch_mode, train_image_based, train_triplet_based,
    triplet_based_gradient, IterationReport, PropagationCounter, TrainConfig, TrainOutcome,
};
