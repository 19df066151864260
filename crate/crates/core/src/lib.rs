//! Multi-section whole-slide recurrence pipeline on precomputed patch embeddings.
//!
//! - [`cohort`]: patient/slide records, endpoint labels, splits, file formats,
//!   synthetic cohort generator
//! - [`sampler`]: kernel-density patch sampling and slide sub-sampling
//! - [`mil`]: gated-attention MIL network, analytic gradients, Adam
//! - [`trainer`]: fold training, cross-validated ensembles, ensemble inference
//! - [`survstats`]: ROC/AUC, bootstrap, DeLong, Cox PH, C-index, Kaplan–Meier, log-rank
//! - [`harness`]: accuracy/cost sweeps and CSV/SVG emission

pub mod cohort;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod io;
pub mod mil;
pub mod plot;
pub mod sampler;
pub mod seed;
pub mod survstats;
pub mod trainer;

pub use cohort::{EndpointLabel, FeatureBlock, LabelValue, PatientRecord, SlideRecord, TStage};
pub use dataset::Dataset;
pub use error::{Error, FormatError, Result};
pub use mil::{MilConfig, MilParams, PatientBag};
pub use sampler::{DensityProfile, KdeMode, SamplingPlan, SlideStrategy};
pub use trainer::{EnsembleModel, TrainConfig};
