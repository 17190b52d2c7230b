//! Subject-deconfounded multi-label action-unit recognition.
//!
//! The crate pairs a causal-intervention module (memory banks, a confounder
//! dictionary of subject prototypes, attention over it and a linear
//! intervention head) with a synthetic structural causal model whose
//! observational and interventional label distributions are exactly
//! enumerable, so every causal claim can be checked against ground truth.
//!
//! The numerical core is generic over [`Scalar`] (`f32`, `f64`); the aliases
//! below fix the precision used by the command-line tools.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cis;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod scm;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cis::{
    aggregate_r, attention_weights, bank_update, cis_forward, rebuild_dictionary, AlphaMode, CisOptions,
    CisOutput, CisParameters, ConfounderDictionary, HeadMode, MemoryBanks, SubjectMemoryBank,
};
pub use datamodel::{load_dataset, save_dataset, AuSample, BackboneKind, Dataset, ModelConfig};
pub use error::{CisError, Result};
pub use eval::{
    evaluate, export_features, f1_scores, oracle_alignment, pcc_cosine, pcc_matrix, split_subject_exclusive,
    EvalReport, FoldPlan, OracleAlignment, ProbabilityModel,
};
pub use model::{binarize, probabilities, AuModel, Variant};
pub use scalar::Scalar;
pub use scm::{confounding_gap, exact_conditional, exact_interventional, AppearanceCode, ScmOracle, ScmSpec};
pub use train::{adaptive_loss, compute_class_frequencies, fit, fit_on_subjects, initialize_dictionary, ClassFrequencies, FitResult, TrainConfig};

pub type AuModelF64 = AuModel<f64>;
pub type AuModelF32 = AuModel<f32>;
pub type CisParametersF64 = CisParameters<f64>;
pub type ConfounderDictionaryF64 = ConfounderDictionary<f64>;
pub type CheckpointF64 = Checkpoint<f64>;
