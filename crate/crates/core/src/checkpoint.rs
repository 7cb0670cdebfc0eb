//! On-disk artifacts passed between stages.
//!
//! Layout under `<checkpoint_root>/<task>/seed_<s>/`:
//!
//! ```text
//! source/class_text_features.json   frozen G^S with its content hash
//! source/manifest.toml              few-shot split used to train it
//! bank/feature_bank.json            W_e values and slots
//! bank/manifest.toml                per-class ids, confidences, padding flags
//! adapt/model.json                  kept dual-branch parameters
//! adapt/metrics.csv                 per-step loss log
//! adapt/stage_manifest.json         every input the target stage read
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::StepMetrics;
use crate::bank::FeatureBank;
use crate::branch::{BranchSettings, CrossAttentionFusion, DualBranchModel, SoftPromptSequence};
use crate::encoder::SampleId;
use crate::error::{CdbnError, Result};
use crate::source::{ClassTextFeatures, FewShotSourceSplit};

pub const CHECKPOINT_ROOT_ENV: &str = "CDBN_CHECKPOINT_ROOT";
pub const SOURCE_FEATURES_FILE: &str = "class_text_features.json";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const BANK_FILE: &str = "feature_bank.json";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STAGE_MANIFEST_FILE: &str = "stage_manifest.json";

/// `$CDBN_CHECKPOINT_ROOT`, else the configured root, else `./checkpoints`.
pub fn checkpoint_root(configured: Option<&Path>) -> PathBuf {
    std::env::var_os(CHECKPOINT_ROOT_ENV)
        .map(PathBuf::from)
        .or_else(|| configured.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("checkpoints"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path, task: &str, seed: u64) -> Self {
        RunLayout {
            dir: root.join(task).join(format!("seed_{seed}")),
        }
    }

    pub fn source_dir(&self) -> PathBuf {
        self.dir.join("source")
    }

    pub fn bank_dir(&self) -> PathBuf {
        self.dir.join("bank")
    }

    pub fn adapt_dir(&self) -> PathBuf {
        self.dir.join("adapt")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CdbnError::malformed(path, e.to_string()))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = toml::to_string_pretty(value).map_err(|e| CdbnError::malformed(path, e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| CdbnError::malformed(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredSourceFeatures {
    content_hash: String,
    features: ClassTextFeatures,
}

/// Writes frozen `G^S`; the only file the target stage reads from the source phase.
pub fn save_source_features(dir: &Path, features: &ClassTextFeatures) -> Result<PathBuf> {
    let path = dir.join(SOURCE_FEATURES_FILE);
    write_json(
        &path,
        &StoredSourceFeatures {
            content_hash: features.content_hash(),
            features: features.clone(),
        },
    )?;
    Ok(path)
}

/// Loads `G^S` and checks it against the hash stored next to it.
pub fn load_source_features(path: &Path) -> Result<ClassTextFeatures> {
    let stored: StoredSourceFeatures = read_json(path)?;
    if !stored.features.frozen {
        return Err(CdbnError::malformed(path, "source class features are not marked frozen"));
    }
    stored.features.verify_hash(&stored.content_hash)?;
    Ok(stored.features)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub seed: u64,
    pub shots_per_class: usize,
    pub classes: Vec<String>,
    pub content_hash: String,
    pub short_classes: Vec<usize>,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub final_loss: f64,
}

impl SourceManifest {
    pub fn new(split: &FewShotSourceSplit, features: &ClassTextFeatures, final_loss: f64) -> Self {
        SourceManifest {
            seed: split.seed,
            shots_per_class: split.shots_per_class,
            classes: features.class_names.clone(),
            content_hash: features.content_hash(),
            short_classes: split.short_classes.clone(),
            sample_ids: split.samples.iter().map(|(id, _)| id.to_string()).collect(),
            labels: split.labels(),
            final_loss,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_toml(&dir.join(MANIFEST_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_toml(&dir.join(MANIFEST_FILE))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankClassEntry {
    pub class: usize,
    pub ids: Vec<String>,
    pub confidences: Vec<f64>,
    pub padded: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub k: usize,
    pub trainable: bool,
    pub checksum: String,
    pub classes: Vec<BankClassEntry>,
}

impl BankManifest {
    pub fn new(bank: &FeatureBank) -> Self {
        BankManifest {
            k: bank.k(),
            trainable: bank.trainable,
            checksum: bank.checksum(),
            classes: bank
                .slots
                .iter()
                .enumerate()
                .map(|(class, slots)| BankClassEntry {
                    class,
                    ids: slots.iter().map(|s| s.sample_id.to_string()).collect(),
                    confidences: slots.iter().map(|s| s.confidence).collect(),
                    padded: slots.iter().map(|s| s.padded).collect(),
                })
                .collect(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_toml(&dir.join(MANIFEST_FILE))
    }
}

pub fn save_feature_bank(dir: &Path, bank: &FeatureBank) -> Result<()> {
    write_json(&dir.join(BANK_FILE), bank)?;
    write_toml(&dir.join(MANIFEST_FILE), &BankManifest::new(bank))
}

pub fn load_feature_bank(dir: &Path) -> Result<FeatureBank> {
    let bank: FeatureBank = read_json(&dir.join(BANK_FILE))?;
    let manifest = BankManifest::load(dir)?;
    let found = bank.checksum();
    if found != manifest.checksum {
        return Err(CdbnError::HashMismatch {
            what: "feature bank",
            expected: manifest.checksum,
            found,
        });
    }
    Ok(bank)
}

/// Trainable arrays plus fusion settings. `G^S` itself is referenced by hash only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualBranchCheckpoint {
    pub epoch: usize,
    pub source_hash: String,
    pub fusion: CrossAttentionFusion,
    pub prompt: SoftPromptSequence,
    pub bank: FeatureBank,
    pub settings: BranchSettings,
}

impl DualBranchCheckpoint {
    pub fn from_model(model: &DualBranchModel, epoch: usize) -> Self {
        DualBranchCheckpoint {
            epoch,
            source_hash: model.source_hash().to_owned(),
            fusion: model.fusion.clone(),
            prompt: model.prompt.clone(),
            bank: model.bank.clone(),
            settings: model.settings,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Rebuilds the model; fails if `source` is not the `G^S` it was trained with.
    pub fn into_model(self, source: ClassTextFeatures) -> Result<DualBranchModel> {
        source.verify_hash(&self.source_hash)?;
        DualBranchModel::new(source, self.fusion, self.prompt, self.bank, self.settings)
    }
}

/// Inputs a stage read, recorded so source-freedom can be audited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub files: Vec<PathBuf>,
    pub sample_ids: Vec<String>,
}

impl StageManifest {
    pub fn new(stage: &str, files: Vec<PathBuf>, ids: &[SampleId]) -> Self {
        StageManifest {
            stage: stage.to_owned(),
            files,
            sample_ids: ids.iter().map(|id| id.to_string()).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(STAGE_MANIFEST_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(STAGE_MANIFEST_FILE))
    }
}

pub fn write_metrics_log(path: &Path, steps: &[StepMetrics]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for s in steps {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}
