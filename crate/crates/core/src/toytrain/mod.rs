//! Synthetic data, a toy two-stream network and its training loop.

pub mod data;
pub mod model;
pub mod train;

pub use data::{pk_sample, synth_dataset, synth_with, PkSampler, SynthConfig, SynthDataset, SynthSample};
pub use model::{Embeddings, ForwardCache, Mode, ModelShape, Params, ToyModel};
pub use train::{init_model, lr_at, train, ClassMap, StepRecord, TrainConfig, TrainLog};
