//! Desk-scale flow-matching diffusion transformer: synthetic data, a toy
//! model whose layers use vanilla or mediator attention, SGD training and
//! an Euler sampler that consults a mediator schedule at every step.
//!
//! The interpolant is linear, `x_t = (1 − t)·x + t·ε`, and the model
//! predicts the velocity `ε − x`. Sampling runs from `t = 1` to `t = 0`.

mod data;
mod fid;
mod model;
mod sample;
mod train;

pub use data::{interpolate, synth_dataset, Dataset, DatasetSpec};
pub use fid::{fid_proxy, FID_DIMS, FID_REG};
pub use model::{
    gaussian, model_forward, model_forward_on, timestep_embedding, AttentionKind, ForwardOutput, ToyModel,
    ToyModelConfig,
};
pub use sample::{
    capture_redundancy, euler_sample, euler_sample_from, initial_noise, zero_velocity, CheckpointEnsemble,
    FnVelocity, SampleOutput, SamplerConfig, VelocityModel, VelocityOutput,
};
pub use train::{batch_loss, eval_loss, loss_csv, train, train_step, Batch, BatchItem, Sgd, TrainConfig, TrainReport};
