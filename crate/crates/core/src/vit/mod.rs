//! A small Vision Transformer with pluggable aggregation heads, its trainer,
//! and a synthetic foreground/background dataset.

mod config;
mod model;
mod params;
mod synth;
mod train;

pub use config::{parse_window_schedule, HeadType, ToyViTConfig};
pub use model::{
    attention, block_forward, forward, forward_on_tape, loss_and_grads, loss_with_selection, patch_embed,
    patch_embed_on_tape, patchify, window_partition, ForwardOutput, SampleGradient, TapeForward,
};
pub use params::{BlockParams, ModelParams, ToyViTParams};
pub use synth::{class_templates, gen_synthetic, SynthConfig, SyntheticSample};
pub use train::{evaluate, train, train_from, EpochLog, EvalReport, TrainOptions, TrainResult};
