//! Few-shot classification engine.
//!
//! Two phases:
//!
//! * **Pretraining** ([`contrastive`]): a luminance encoder and a
//!   chrominance encoder are trained with a symmetric in-batch contrastive
//!   loss; a sample's feature is the concatenation of both embeddings.
//! * **Task training** ([`graph`], [`classifier`]): for an N-way k-shot
//!   episode, support and query features form a cosine nearest-neighbor
//!   graph, features are propagated as `(αI + E)^γ V`, and a softmax
//!   classifier is trained on the support vertices with mixup copies, then
//!   retrained by self-distillation.
//!
//! [`eval`] runs many sampled episodes and reports mean accuracy with 95%
//! confidence intervals.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the width. Files always store `f64`.

pub mod classifier;
pub mod contrastive;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod scalar;

pub use classifier::{
    ce_loss, distill_loss, forward, kl_div, mixup_augment, predict, train_stage1, train_stage2,
    ClassifierGrads, ClassifierParams, KlDirection, MixupPlan, Stage1Objective, StageOutcome,
    TaskTrainConfig,
};
pub use contrastive::{
    contrast_loss, extract_features, pretrain, split_views, EncoderArch, PretrainConfig,
    PretrainOutcome, RawSample, SyntheticPairs,
};
pub use dataset::{
    import_csv, load_features, sample_episode, save_features, Episode, EpisodeSpec,
    FeatureDataset, Record,
};
pub use encoder::{encode, load_encoders, save_encoders, EncoderParams, Mlp};
pub use error::{Error, Result};
pub use eval::{
    ablation_grid, evaluate, run_episode, sweep_k, Ablation, EpisodeConfig, EvalConfig,
    EvalReport, SyntheticClusters,
};
pub use graph::{
    build_similarity, cosine_similarity, normalize_adjacency, propagate, propagate_alpha_grad,
    sparsify_top_m, GraphConfig, PropagationConfig, SparsifyRule, TaskGraph,
};
pub use linalg::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type TaskGraph64 = TaskGraph<f64>;
pub type TaskGraph32 = TaskGraph<f32>;
pub type ClassifierParams64 = ClassifierParams<f64>;
pub type ClassifierParams32 = ClassifierParams<f32>;
pub type EncoderParams64 = EncoderParams<f64>;
pub type EncoderParams32 = EncoderParams<f32>;
