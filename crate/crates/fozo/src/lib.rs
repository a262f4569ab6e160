//! Forward-only zeroth-order test-time adaptation toolkit.
//!
//! Adapts learnable input prompts of a frozen classifier over a streaming,
//! distribution-shifted batch sequence using seed-replayed SPSA gradient
//! estimation, a decaying/resetting perturbation scale, and an unsupervised
//! objective combining prediction entropy with deep-shallow feature-statistics
//! alignment. Ships a toy frozen transformer (float and INT8 variants) and
//! synthetic shift streams so the whole loop runs at desk scale.

pub mod engine;
pub mod error;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod stream;
pub mod tensor;

pub use engine::{
    accuracy_auc, evaluate_stream, mean_accuracy, metrics_from_csv, metrics_to_csv, run_stream,
    select_predictions, AdaptConfig, AdaptSession, BatchMetrics, PassEval, RunMode,
};
pub use error::{FozoError, Result};
pub use stream::{
    build_stream, corrupt, generate_source, CorruptionKind, DomainSpec, Segment, StreamBatch,
    StreamSchedule, TaskSpec,
};
pub use losses::{
    entropy_loss, estimate_source_stats, stats_alignment_loss, total_loss, LossBreakdown,
    SourceStats, DEFAULT_LAMBDA,
};
pub use optimizer::{
    apply_updates, epsilon_step, nspsa_gradient_mc_check, regen_perturbation, spsa_probe,
    EpsilonState, OptimizerConfig, PerturbRecord, SpsaProbe,
};
pub use model::{
    predict, Checkpoint, ForwardOutput, FrozenModel, LayerWeights, ModelSpec, ModelWeights,
    PromptModel, PromptSet,
};
pub use quant::{quantize, QuantMat, QuantizedModel};
pub use rng::{gaussian, uniform, SeedStream, GENERATOR_ID};
pub use scalar::Scalar;

/// Double-precision tensor, the concrete type used by the model, losses, and
/// optimizer. The SPSA estimator relies on f64 headroom when dividing small
/// loss differences by `2ε`.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor, available through the generic math layer.
pub type Tensor32 = tensor::Tensor<f32>;

pub use tensor::Tensor;
