//! Cross-modal self-supervised speaker embeddings.
//!
//! Two convolutional streams, one over face frames and one over audio
//! frames, each end in an identity head and a content head. Training matches
//! the streams against each other on synchronized content and on speaker
//! identity, optionally with confusion terms that push each head to carry no
//! signal for the other task. Evaluation covers within-track and cross-track
//! matching accuracy, verification EER, and a frozen-embedding linear probe.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use data::{generate_synthetic, sample_batch, Batch, Dataset, FaceTrack, SynthConfig};
pub use error::{Error, Result};
pub use eval::{
    compute_eer, cosine_score, eval_matching_tasks, linear_probe, run_verification, EmbeddingKind, EvalConfig,
    MetricsReport, ProbeConfig, TrialConfig, TrialList,
};
pub use losses::{LossOptions, LossWeights, Regime};
pub use nets::{EncoderConfig, Modality, ParamStore};
pub use tensor::{Graph, Target, Tensor, Var};
pub use train::{train, train_supervised_baseline, RunLog, TrainConfig};
