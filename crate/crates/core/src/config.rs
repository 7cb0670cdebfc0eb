//! Declarative run configuration.
//!
//! One TOML file with a section per stage. Unknown keys anywhere are
//! rejected so that a typo never silently falls back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::branch::{AttentionScope, GateKind};
use crate::data::SyntheticTaskSpec;
use crate::encoder::{MockEncoderConfig, PREFIX_LEN};
use crate::error::{CdbnError, Result};
use crate::objectives::{EmbeddingAugment, LossSwitches};
use crate::optim::{AdamConfig, WeightDecayMode};
use crate::source::{SimilarityKernel, SourceTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Mock,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub backend: Backend,
    pub seed: u64,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub max_sequence_length: usize,
    pub model_name: Option<String>,
    pub weights_path: Option<PathBuf>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let m = MockEncoderConfig::default();
        EncoderSection {
            backend: Backend::Mock,
            seed: m.seed,
            embed_dim: m.embed_dim,
            token_dim: m.token_dim,
            max_sequence_length: m.max_sequence_length,
            model_name: None,
            weights_path: None,
        }
    }
}

impl EncoderSection {
    pub fn mock_config(&self) -> MockEncoderConfig {
        MockEncoderConfig {
            seed: self.seed,
            embed_dim: self.embed_dim,
            token_dim: self.token_dim,
            max_sequence_length: self.max_sequence_length,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub root: Option<PathBuf>,
    pub source_domain: String,
    pub target_domain: String,
    pub synthetic: SyntheticTaskSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Synthetic,
            root: None,
            source_domain: "source".into(),
            target_domain: "target".into(),
            synthetic: SyntheticTaskSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub shots_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub kernel: SimilarityKernel,
    /// 0 = full batch.
    pub batch_size: usize,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            shots_per_class: 8,
            epochs: 200,
            lr: 1e-3,
            kernel: SimilarityKernel::Cosine,
            batch_size: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankSection {
    pub k: usize,
    pub trainable: bool,
    /// Re-select the bank from current fused predictions every N epochs; 0 = never.
    pub refresh_every: usize,
}

impl Default for BankSection {
    fn default() -> Self {
        BankSection {
            k: 8,
            trainable: true,
            refresh_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub alpha_fuse: f64,
    pub attention_scope: AttentionScope,
    pub gate: GateKind,
    /// Multiplier on fused cosine logits before the softmax. 1.0 is the plain
    /// weighted sum.
    pub logit_scale: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            alpha_fuse: 0.5,
            attention_scope: AttentionScope::PerClass,
            gate: GateKind::Scalar,
            logit_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetPromptSection {
    pub m: usize,
    pub include_class_name: bool,
}

impl Default for TargetPromptSection {
    fn default() -> Self {
        TargetPromptSection {
            m: 16,
            include_class_name: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectivesSection {
    pub theta_t: f64,
    pub losses: LossSwitches,
    pub augment: EmbeddingAugment,
}

impl Default for ObjectivesSection {
    fn default() -> Self {
        ObjectivesSection {
            theta_t: 0.95,
            losses: LossSwitches::default(),
            augment: EmbeddingAugment::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    CosineAnnealing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    /// Keep the epoch with the highest labeled target accuracy.
    Benchmark,
    /// Keep the last epoch; labels are never consulted during training.
    #[default]
    Unsupervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationSection {
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub momentum_beta: f64,
    pub second_moment_beta: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub schedule: Schedule,
    pub checkpoint_mode: CheckpointMode,
    /// Draw pseudo-labeled batches round-robin over classes.
    pub class_balanced_pseudo: bool,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        AdaptationSection {
            tau: 1.0,
            batch_size: 32,
            lr: 1e-3,
            lr_floor: 0.0,
            momentum_beta: 0.9,
            second_moment_beta: 0.999,
            weight_decay: 5e-4,
            decay_mode: WeightDecayMode::Decoupled,
            epochs: 30,
            seeds: vec![1, 2, 3],
            schedule: Schedule::CosineAnnealing,
            checkpoint_mode: CheckpointMode::Unsupervised,
            class_balanced_pseudo: true,
        }
    }
}

impl AdaptationSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.momentum_beta,
            beta2: self.second_moment_beta,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub checkpoint_root: Option<PathBuf>,
    pub task_name: Option<String>,
}

/// Complete configuration of a source phase plus target adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub encoder: EncoderSection,
    pub data: DataSection,
    pub source: SourceSection,
    pub bank: BankSection,
    pub fusion: FusionSection,
    pub target_prompt: TargetPromptSection,
    pub objectives: ObjectivesSection,
    pub adaptation: AdaptationSection,
    pub output: OutputSection,
}

/// The pinned synthetic task with settings under which every loss term is active.
pub const PINNED_SYNTHETIC_TOML: &str = include_str!("../configs/synthetic.toml");

fn invalid(msg: impl Into<String>) -> CdbnError {
    CdbnError::ConfigInvalid(msg.into())
}

impl AdaptationConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: AdaptationConfig = toml::from_str(s).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pinned_synthetic() -> Self {
        Self::from_toml_str(PINNED_SYNTHETIC_TOML).expect("pinned config parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn source_train_config(&self) -> SourceTrainConfig {
        SourceTrainConfig {
            epochs: self.source.epochs,
            lr: self.source.lr,
            tau: self.adaptation.tau,
            kernel: self.source.kernel,
            optimizer: self.adaptation.adam(),
            batch_size: self.source.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adaptation;
        let f = &self.fusion;
        if !(0.0..=1.0).contains(&f.alpha_fuse) {
            return Err(invalid(format!("fusion.alpha_fuse must lie in [0, 1], got {}", f.alpha_fuse)));
        }
        if !(f.logit_scale > 0.0 && f.logit_scale.is_finite()) {
            return Err(invalid("fusion.logit_scale must be positive"));
        }
        if self.bank.k == 0 {
            return Err(invalid("bank.k must be at least 1"));
        }
        if self.target_prompt.m == 0 {
            return Err(invalid("target_prompt.m must be at least 1"));
        }
        let th = self.objectives.theta_t;
        if !(th > 0.0 && th <= 1.0) {
            return Err(invalid(format!("objectives.theta_t must lie in (0, 1], got {th}")));
        }
        self.objectives.augment.validate()?;
        if !(a.tau > 0.0 && a.tau.is_finite()) {
            return Err(invalid("adaptation.tau must be positive"));
        }
        if a.batch_size == 0 {
            return Err(invalid("adaptation.batch_size must be at least 1"));
        }
        if !(a.lr > 0.0) || a.lr_floor < 0.0 || a.lr_floor > a.lr {
            return Err(invalid("adaptation.lr must be positive and lr_floor in [0, lr]"));
        }
        for (name, b) in [("momentum_beta", a.momentum_beta), ("second_moment_beta", a.second_moment_beta)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("adaptation.{name} must lie in [0, 1)")));
            }
        }
        if a.weight_decay < 0.0 {
            return Err(invalid("adaptation.weight_decay must be non-negative"));
        }
        if a.seeds.is_empty() {
            return Err(invalid("adaptation.seeds must list at least one seed"));
        }
        if self.source.shots_per_class == 0 {
            return Err(invalid("source.shots_per_class must be at least 1"));
        }
        if !(self.source.lr > 0.0) {
            return Err(invalid("source.lr must be positive"));
        }
        let e = &self.encoder;
        if e.embed_dim == 0 || e.token_dim == 0 {
            return Err(invalid("encoder dimensions must be positive"));
        }
        if PREFIX_LEN + 1 > e.max_sequence_length || self.target_prompt.m + 1 > e.max_sequence_length {
            return Err(invalid("prompt length exceeds encoder.max_sequence_length"));
        }
        if e.backend == Backend::Pretrained && (e.model_name.is_none() || e.weights_path.is_none()) {
            return Err(invalid("pretrained backend needs encoder.model_name and encoder.weights_path"));
        }
        if self.data.kind == DataKind::Directory && self.data.root.is_none() {
            return Err(invalid("directory data needs data.root"));
        }
        if self.data.kind == DataKind::Synthetic && self.data.synthetic.dim != e.embed_dim {
            return Err(invalid(format!(
                "data.synthetic.dim ({}) must equal encoder.embed_dim ({})",
                self.data.synthetic.dim, e.embed_dim
            )));
        }
        Ok(())
    }
}

/// Command-line overrides for the most commonly swept keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigOverrides {
    pub alpha_fuse: Option<f64>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub theta_t: Option<f64>,
    pub tau: Option<f64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum_beta: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub bank_trainable: Option<bool>,
    pub shots: Option<usize>,
    pub losses: Option<LossSwitches>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut AdaptationConfig) -> Result<()> {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.alpha_fuse => cfg.fusion.alpha_fuse);
        set!(self.k => cfg.bank.k);
        set!(self.m => cfg.target_prompt.m);
        set!(self.theta_t => cfg.objectives.theta_t);
        set!(self.tau => cfg.adaptation.tau);
        set!(self.batch_size => cfg.adaptation.batch_size);
        set!(self.lr => cfg.adaptation.lr);
        set!(self.momentum_beta => cfg.adaptation.momentum_beta);
        set!(self.weight_decay => cfg.adaptation.weight_decay);
        set!(self.epochs => cfg.adaptation.epochs);
        set!(self.seeds => cfg.adaptation.seeds);
        set!(self.bank_trainable => cfg.bank.trainable);
        set!(self.shots => cfg.source.shots_per_class);
        set!(self.losses => cfg.objectives.losses);
        cfg.validate()
    }
}
