//! Weakly supervised pseudo-annotation from decoupled spatial attention.
//!
//! The crate trains a two-headed attention model on dense feature maps using
//! only image-level labels, turns the resulting attention maps into
//! per-pixel pseudo-annotation masks, refines them with a fully connected
//! CRF, and scores them against ground truth. A synthetic blob-scene
//! generator provides desk-scale datasets so the whole path is reproducible
//! from a single seed.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`tensor`] / [`autodiff`] -- dense `f64` tensors and the reverse-mode
//!   tape covering exactly the ops the model needs, plus finite-difference
//!   gradient checking.
//! * [`attention`] -- the decoupled model, the conventional and
//!   single-stream baselines, and the minibatch SGD trainer.
//! * [`annotation`] -- attention-to-mask thresholding, map merging, and CRF
//!   unary construction.
//! * [`crf`] -- exact O(N^2) mean-field inference with bilateral and
//!   smoothness kernels.
//! * [`metrics`] -- per-class IoU / precision / recall tallies.
//! * [`synthetic`] / [`pipeline`] -- scene generation and the end-to-end
//!   experiment harness (train, annotate, refine, evaluate, sweep).
//! * [`io`] -- the DTEN tensor format, PGM/PPM rasters, checkpoints, and
//!   dataset manifests.

pub mod annotation;
pub mod attention;
pub mod autodiff;
pub mod crf;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use annotation::{PseudoMask, ProbField, BACKGROUND, VOID};
pub use attention::{
    ForwardOutputs, ModelParams, Sample, TrainConfig, TrainReport, TrainedModel, Variant,
};
pub use autodiff::{grad_check, Graph, NodeId};
pub use crf::{CrfConfig, Marginals, Unary};
pub use error::{Error, Result};
pub use metrics::{ConfusionTally, Scores};
pub use pipeline::{ExperimentSpec, MergeNorm, PipelineReport, SweepTable};
pub use synthetic::{DatasetConfig, SyntheticScene};
pub use tensor::Tensor;
