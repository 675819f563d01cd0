//! End-to-end glue: composite loss, training loop, dual-chain sampling,
//! evaluation, and the synthetic dataset generator.

pub mod data;
pub mod loss;
pub mod metrics;
pub mod sample;
pub mod train;

pub use data::{synth_dataset, synth_dataset_with, GenMeta, SampleRecord, SynthOptions};
pub use loss::{scc_loss, total_loss, LossParts};
pub use metrics::{dice, evaluate, EvalReport};
pub use sample::{
    sample_segmentation, sample_with, ConstDenoiser, Denoiser, ModelDenoiser, OracleDenoiser,
    SegmentationSample,
};
pub use train::{train_loop, train_step, AdamState, StepOutput, TrainState};
