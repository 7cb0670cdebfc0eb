//! Few-shot source-free domain adaptation over frozen vision-language encoders.
//!
//! A handful of labeled source samples train one text token per class, giving
//! frozen class features `G^S`. On the unlabeled target domain, a transfer
//! branch refines `G^S` by attending over a bank of confident target features
//! and a target branch learns a soft prompt; their logits are fused.
//!
//! Start with the runnable programs in `examples/`.

pub mod adapt;
pub mod bank;
pub mod branch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod math;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod source;

pub use adapt::{AdaptationOutcome, EvalReport, RunResult, TargetSet, evaluate, run_adaptation};
pub use bank::{FeatureBank, HighConfidenceSet, PseudoLabelRecord, assign_pseudo_labels, build_feature_bank, select_top_k};
pub use branch::{DualBranchModel, FusedPrediction};
pub use config::AdaptationConfig;
pub use encoder::{EncoderPair, MockEncoderConfig, MockEncoderPair, SampleId};
pub use error::{CdbnError, Result};
pub use objectives::LossSwitches;
pub use pipeline::{PreparedData, SweepAxis, prepare_data, run_pipeline, run_sweep};
pub use source::{ClassTextFeatures, FewShotSourceSplit, train_source_prompts};
