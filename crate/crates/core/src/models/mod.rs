//! Trainable networks: conditional denoiser, attribute classifier, latent codec.

mod classifier;
mod codec;
mod denoiser;
mod layers;
pub mod persist;

pub use classifier::{
    argmax, one_hot, train_classifier, train_classifier_with, ClassifierConfig, ClassifierModel,
    ClassifierReport, ClassifierTrainConfig, ClassifierVars,
};
pub use codec::{train_codec, Codec, CodecTrainConfig, CodecVars, LearnedCodec};
pub use denoiser::{
    time_features, train_denoiser, DenoiserConfig, DenoiserModel, DenoiserTrainConfig, DenoiserVars,
};
pub use layers::{Linear, LinearVars};
