//! Learning-to-hash training and evaluation toolkit.
//!
//! A small feed-forward encoder with exact hand-written backpropagation
//! learns binary codes under a pairwise similarity loss. Code bits that get
//! stuck in the tanh saturated region while their gradient points back out
//! ("dead bits") are tracked throughout training and rescued two ways: a
//! gradient amplifier that rescales exactly those entries, and an
//! error-aware quantization loss that only pulls bits toward poles already
//! consistent with the pair's similarity label. Evaluation ranks packed
//! sign codes by Hamming distance and reports MAP and precision-recall
//! curves.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod rescue;
pub mod telemetry;
pub mod trainer;

pub use config::{DatasetSource, RunConfig};
pub use data::{
    generate_synthetic, load_csv, save_csv, similarity, split_bundle, Batch, BatchSampler,
    DatasetBundle, FeatureDataset, Split, Standardizer, SyntheticSpec,
};
pub use error::{Error, Result};
pub use eval::{
    binarize, hamming, map_at_k, metrics_csv_string, metrics_json_string, pr_curve,
    rank_gallery, write_metrics, MetricRow, PackedCodes, PrPoint, RankingResult,
};
pub use losses::{
    combined_loss, eaq_quantization, l2_quantization, logcosh_quantization, similarity_loss,
    CombinedLoss, EaqSelection, LossValue, QuantizerKind, SimilarityBlock,
};
pub use matrix::{sign_pm, Matrix};
pub use nn::{sgd_step, Activation, EncoderModel, ForwardTape, Gradients, OptimizerState};
pub use rescue::{amplify, count_dead_bits, AmplifierConfig, DeadBitReport};
pub use telemetry::{EpochRecord, EvalRecord, LogRecord, StepRecord, TrainingLog};
pub use trainer::{
    ablation_suite, encode_dataset, evaluate, load_data, run_experiment, scan_dead_bits, train,
    train_observed, AblationOutcome, AblationRow, AblationVariant, EvalMetrics, LoadedData,
    StepTrace, TrainObserver,
};
