//! Stage functions and multi-seed / sweep drivers.
//!
//! The adaptation stage takes `G^S` and target inputs only. Every file and
//! sample id it reads is written to a stage manifest next to its outputs.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptationOutcome, EvalReport, PseudoLabeledSubset, RunResult, TargetSet, evaluate, mean, run_adaptation};
use crate::bank::{FeatureBank, HighConfidenceSet, PseudoLabelRecord, assign_pseudo_labels, build_feature_bank, select_top_k};
use crate::branch::{BranchSettings, CrossAttentionFusion, DualBranchModel, SoftPromptSequence};
use crate::checkpoint::{
    DualBranchCheckpoint, MODEL_FILE, RunLayout, SOURCE_FEATURES_FILE, SourceManifest, StageManifest, checkpoint_root,
    load_source_features, save_feature_bank, save_source_features,
};
use crate::config::{AdaptationConfig, Backend, DataKind};
use crate::data::{IngestOptions, generate_synthetic_task, ingest_dataset, load_class_anchors, load_embeddings};
use crate::encoder::{BackendRegistry, EncoderPair, MockEncoderPair, MockImageEncoder, PretrainedSpec, SampleId};
use crate::error::{CdbnError, Result};
use crate::objectives::LossSwitches;
use crate::source::{ClassTextFeatures, FewShotSourceSplit, nearest_class_accuracy, train_source_prompts};

/// Encoders plus the two domains, ready for the stages.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub encoders: EncoderPair,
    pub class_names: Vec<String>,
    pub source_pool: Vec<(SampleId, usize)>,
    pub target_ids: Vec<SampleId>,
    /// Held-out target labels, read only by evaluation.
    pub target_labels: Option<Vec<usize>>,
}

/// Builds encoders and domains from the data and encoder sections.
pub fn prepare_data(cfg: &AdaptationConfig, registry: &BackendRegistry) -> Result<PreparedData> {
    cfg.validate()?;
    match cfg.data.kind {
        DataKind::Synthetic => {
            let task = generate_synthetic_task(&cfg.data.synthetic)?;
            let encoders = match cfg.encoder.backend {
                Backend::Mock => {
                    let mut pair = MockEncoderPair::new(
                        cfg.encoder.mock_config(),
                        task.class_names.clone(),
                        Some(task.anchors.view()),
                    )?;
                    pair.image = task.image_encoder()?;
                    EncoderPair::from_mock(pair)
                }
                Backend::Pretrained => resolve_pretrained(cfg, registry, &task.class_names)?,
            };
            Ok(PreparedData {
                encoders,
                class_names: task.class_names.clone(),
                source_pool: task.source_pool(),
                target_ids: task.target_ids(),
                target_labels: Some(task.target_labels()),
            })
        }
        DataKind::Directory => {
            let root = cfg.data.root.as_deref().expect("validated");
            let dataset = ingest_dataset(root, &IngestOptions::default())?;
            let source_pool = dataset.labeled_pool(&cfg.data.source_domain)?;
            let target = dataset.labeled_pool(&cfg.data.target_domain)?;
            let encoders = match cfg.encoder.backend {
                Backend::Mock => {
                    let anchors = load_class_anchors(root, &dataset.classes)?;
                    let mut pair =
                        MockEncoderPair::new(cfg.encoder.mock_config(), dataset.classes.clone(), anchors.as_ref().map(|a| a.view()))?;
                    let mut image = MockImageEncoder::new(cfg.encoder.embed_dim);
                    load_embeddings(dataset.manifest.iter(), &mut image)?;
                    pair.image = image;
                    EncoderPair::from_mock(pair)
                }
                Backend::Pretrained => resolve_pretrained(cfg, registry, &dataset.classes)?,
            };
            Ok(PreparedData {
                encoders,
                class_names: dataset.classes.clone(),
                source_pool,
                target_ids: target.iter().map(|(id, _)| id.clone()).collect(),
                target_labels: Some(target.iter().map(|(_, y)| *y).collect()),
            })
        }
    }
}

fn resolve_pretrained(cfg: &AdaptationConfig, registry: &BackendRegistry, classes: &[String]) -> Result<EncoderPair> {
    registry.resolve(&PretrainedSpec {
        model_name: cfg.encoder.model_name.clone().unwrap_or_default(),
        weights_path: cfg.encoder.weights_path.clone().unwrap_or_default(),
        class_names: classes.to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct SourceStageOutput {
    pub features: ClassTextFeatures,
    pub split: FewShotSourceSplit,
    pub final_loss: f64,
}

/// Draws the few-shot split and learns frozen `G^S`.
pub fn source_stage(data: &PreparedData, cfg: &AdaptationConfig, seed: u64, out_dir: Option<&Path>) -> Result<SourceStageOutput> {
    let split = FewShotSourceSplit::draw(&data.source_pool, data.class_names.len(), cfg.source.shots_per_class, seed)?;
    let outcome = train_source_prompts(&split, &data.encoders, &data.class_names, &cfg.source_train_config())?;
    let final_loss = *outcome.loss_history.last().expect("initial loss recorded");
    if let Some(dir) = out_dir {
        save_source_features(dir, &outcome.class_features)?;
        SourceManifest::new(&split, &outcome.class_features, final_loss).save(dir)?;
    }
    Ok(SourceStageOutput {
        features: outcome.class_features,
        split,
        final_loss,
    })
}

#[derive(Clone, Debug)]
pub struct BankStageOutput {
    pub records: Vec<PseudoLabelRecord>,
    pub selected: HighConfidenceSet,
    pub bank: FeatureBank,
}

/// Pseudo-labels the target set with `G^S` and fills the per-class bank.
pub fn bank_stage(source: &ClassTextFeatures, target: &TargetSet, data: &PreparedData, cfg: &AdaptationConfig, out_dir: Option<&Path>) -> Result<BankStageOutput> {
    let records = assign_pseudo_labels(
        &target.ids,
        target.features.view(),
        source,
        cfg.adaptation.tau,
        cfg.source.kernel,
    )?;
    let selected = select_top_k(&records, source.num_classes(), cfg.bank.k)?;
    let bank = build_feature_bank(&selected, data.encoders.image.as_ref(), cfg.bank.trainable)?;
    if let Some(dir) = out_dir {
        save_feature_bank(dir, &bank)?;
    }
    Ok(BankStageOutput { records, selected, bank })
}

/// Fresh dual-branch model around a frozen `G^S` and a bank.
pub fn init_model(source: ClassTextFeatures, bank: FeatureBank, data: &PreparedData, cfg: &AdaptationConfig, seed: u64) -> Result<DualBranchModel> {
    let d = source.dim();
    let fusion = CrossAttentionFusion::init(d, cfg.fusion.attention_scope, cfg.fusion.gate, seed);
    let prompt = SoftPromptSequence::init(cfg.target_prompt.m, data.encoders.text.token_dim(), seed);
    DualBranchModel::new(
        source,
        fusion,
        prompt,
        bank,
        BranchSettings {
            alpha_fuse: cfg.fusion.alpha_fuse,
            logit_scale: cfg.fusion.logit_scale,
            include_class_name: cfg.target_prompt.include_class_name,
        },
    )
}

/// Target phase from a stored `G^S`: bank, model, training. Reads no source data.
pub fn adapt_stage(
    source_features_path: &Path,
    data: &PreparedData,
    cfg: &AdaptationConfig,
    seed: u64,
    layout: Option<&RunLayout>,
) -> Result<(BankStageOutput, AdaptationOutcome)> {
    let source = load_source_features(source_features_path)?;
    let target = TargetSet::encode(data.target_ids.clone(), &data.encoders)?;
    adapt_from_features(source, &target, data, cfg, seed, layout, vec![source_features_path.to_path_buf()])
}

fn adapt_from_features(
    source: ClassTextFeatures,
    target: &TargetSet,
    data: &PreparedData,
    cfg: &AdaptationConfig,
    seed: u64,
    layout: Option<&RunLayout>,
    files: Vec<PathBuf>,
) -> Result<(BankStageOutput, AdaptationOutcome)> {
    let bank_dir = layout.map(RunLayout::bank_dir);
    let adapt_dir = layout.map(RunLayout::adapt_dir);
    let banked = bank_stage(&source, target, data, cfg, bank_dir.as_deref())?;
    let pseudo = PseudoLabeledSubset::from_high_confidence(&banked.selected, target)?;
    let model = init_model(source, banked.bank.clone(), data, cfg, seed)?;
    if let Some(dir) = &adapt_dir {
        StageManifest::new("adapt", files, &target.ids).save(dir)?;
    }
    let outcome = run_adaptation(
        model,
        &data.encoders,
        target,
        &pseudo,
        data.target_labels.as_deref(),
        cfg,
        seed,
        adapt_dir.as_deref(),
    )?;
    Ok((banked, outcome))
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub source_only_accuracy: f64,
    pub accuracy: f64,
    pub outcome: AdaptationOutcome,
    pub checkpoint: Option<PathBuf>,
}

/// Source phase then target phase for one seed.
pub fn run_seed(data: &PreparedData, cfg: &AdaptationConfig, seed: u64, root: Option<&Path>) -> Result<SeedResult> {
    let source = source_stage(data, cfg, seed, None)?;
    run_seed_with_source(data, cfg, seed, &source.features, root)
}

fn run_seed_with_source(
    data: &PreparedData,
    cfg: &AdaptationConfig,
    seed: u64,
    source: &ClassTextFeatures,
    root: Option<&Path>,
) -> Result<SeedResult> {
    let labels = data.target_labels.as_deref().ok_or(CdbnError::EmptyEvalSet)?;
    let target = TargetSet::encode(data.target_ids.clone(), &data.encoders)?;
    let source_only_accuracy =
        nearest_class_accuracy(target.features.view(), source.features.view(), labels, cfg.source.kernel)?;
    let layout = root.map(|r| RunLayout::new(r, cfg.output.task_name.as_deref().unwrap_or("task"), seed));
    let files = match &layout {
        Some(l) => vec![save_source_features(&l.source_dir(), source)?],
        None => Vec::new(),
    };
    let (_, outcome) = adapt_from_features(source.clone(), &target, data, cfg, seed, layout.as_ref(), files)?;
    let accuracy = outcome
        .final_eval
        .as_ref()
        .map(|e| e.accuracy)
        .ok_or(CdbnError::EmptyEvalSet)?;
    info!("seed {seed}: source-only {source_only_accuracy:.4}, adapted {accuracy:.4}");
    Ok(SeedResult {
        seed,
        source_only_accuracy,
        accuracy,
        checkpoint: layout.map(|l| l.adapt_dir()),
        outcome,
    })
}

fn collect_run(results: Vec<SeedResult>) -> RunResult {
    let per_seed_accuracy: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    RunResult {
        seeds: results.iter().map(|r| r.seed).collect(),
        mean_accuracy: mean(&per_seed_accuracy),
        per_seed_accuracy,
        source_only_accuracy: results.iter().map(|r| r.source_only_accuracy).collect(),
        loss_history: results.iter().map(|r| r.outcome.step_history.clone()).collect(),
        checkpoints: results.into_iter().filter_map(|r| r.checkpoint).collect(),
    }
}

/// All configured seeds, run in parallel. Results are ordered by seed position.
pub fn run_pipeline(data: &PreparedData, cfg: &AdaptationConfig, root: Option<&Path>) -> Result<RunResult> {
    let results = cfg
        .adaptation
        .seeds
        .par_iter()
        .map(|&seed| run_seed(data, cfg, seed, root))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_run(results))
}

/// Checkpoint root for CLI runs: env var, then config, then `./checkpoints`.
pub fn default_root(cfg: &AdaptationConfig) -> PathBuf {
    checkpoint_root(cfg.output.checkpoint_root.as_deref())
}

/// One swept hyperparameter and its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "values")]
pub enum SweepAxis {
    AlphaFuse(Vec<f64>),
    K(Vec<usize>),
    SourceShots(Vec<usize>),
    LossCombination(Vec<LossSwitches>),
}

impl SweepAxis {
    pub fn default_alpha() -> Self {
        SweepAxis::AlphaFuse((0..=10).map(|i| i as f64 / 10.0).collect())
    }

    pub fn default_k() -> Self {
        SweepAxis::K(vec![1, 2, 4, 8, 16])
    }

    pub fn default_shots() -> Self {
        SweepAxis::SourceShots(vec![1, 2, 4, 8, 16])
    }

    pub fn default_losses() -> Self {
        SweepAxis::LossCombination(LossSwitches::ablation_grid().to_vec())
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "alpha_fuse" | "alpha" => Ok(Self::default_alpha()),
            "k" | "K" => Ok(Self::default_k()),
            "source_shots" | "shots" => Ok(Self::default_shots()),
            "loss_combination" | "losses" => Ok(Self::default_losses()),
            other => Err(CdbnError::ConfigInvalid(format!("unknown sweep axis {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::AlphaFuse(_) => "alpha_fuse",
            SweepAxis::K(_) => "k",
            SweepAxis::SourceShots(_) => "source_shots",
            SweepAxis::LossCombination(_) => "loss_combination",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::AlphaFuse(v) => v.len(),
            SweepAxis::K(v) | SweepAxis::SourceShots(v) => v.len(),
            SweepAxis::LossCombination(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Config for cell `i` and its printable value.
    pub fn cell(&self, base: &AdaptationConfig, i: usize) -> (AdaptationConfig, String) {
        let mut cfg = base.clone();
        let label = match self {
            SweepAxis::AlphaFuse(v) => {
                cfg.fusion.alpha_fuse = v[i];
                format!("{:.1}", v[i])
            }
            SweepAxis::K(v) => {
                cfg.bank.k = v[i];
                v[i].to_string()
            }
            SweepAxis::SourceShots(v) => {
                cfg.source.shots_per_class = v[i];
                v[i].to_string()
            }
            SweepAxis::LossCombination(v) => {
                cfg.objectives.losses = v[i];
                v[i].label()
            }
        };
        (cfg, label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub axis: String,
    pub value: String,
    pub losses: LossSwitches,
    pub seeds: Vec<u64>,
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Runs every cell for every seed. `G^S` is trained once per (shots, seed) and
/// shared by the cells that use it; the output order follows the axis values.
pub fn run_sweep(data: &PreparedData, base: &AdaptationConfig, axis: &SweepAxis) -> Result<Vec<SweepCell>> {
    let cells: Vec<(AdaptationConfig, String)> = (0..axis.len()).map(|i| axis.cell(base, i)).collect();
    for (cfg, _) in &cells {
        cfg.validate()?;
    }
    let mut shot_seed: Vec<(usize, u64)> = cells
        .iter()
        .flat_map(|(cfg, _)| cfg.adaptation.seeds.iter().map(|&s| (cfg.source.shots_per_class, s)))
        .collect();
    shot_seed.sort_unstable();
    shot_seed.dedup();
    let sources = shot_seed
        .par_iter()
        .map(|&(shots, seed)| {
            let mut cfg = base.clone();
            cfg.source.shots_per_class = shots;
            source_stage(data, &cfg, seed, None).map(|s| ((shots, seed), s.features))
        })
        .collect::<Result<Vec<_>>>()?;
    let lookup = |shots: usize, seed: u64| {
        &sources
            .iter()
            .find(|(key, _)| *key == (shots, seed))
            .expect("source trained for every cell")
            .1
    };

    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, (cfg, _))| cfg.adaptation.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let cfg = &cells[i].0;
            run_seed_with_source(data, cfg, seed, lookup(cfg.source.shots_per_class, seed), None)
                .map(|r| (i, r.seed, r.accuracy))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(cells
        .iter()
        .enumerate()
        .map(|(i, (cfg, value))| {
            let per: Vec<(u64, f64)> = results.iter().filter(|r| r.0 == i).map(|r| (r.1, r.2)).collect();
            let per_seed_accuracy: Vec<f64> = per.iter().map(|p| p.1).collect();
            SweepCell {
                axis: axis.name().to_owned(),
                value: value.clone(),
                losses: cfg.objectives.losses,
                seeds: per.iter().map(|p| p.0).collect(),
                mean_accuracy: mean(&per_seed_accuracy),
                per_seed_accuracy,
            }
        })
        .collect())
}

/// Scores the stored model of one seed on the labeled target set.
pub fn evaluate_stage(data: &PreparedData, layout: &RunLayout) -> Result<EvalReport> {
    let labels = data.target_labels.as_deref().ok_or(CdbnError::EmptyEvalSet)?;
    let source = load_source_features(&layout.source_dir().join(SOURCE_FEATURES_FILE))?;
    let model = DualBranchCheckpoint::load(&layout.adapt_dir().join(MODEL_FILE))?.into_model(source)?;
    let target = TargetSet::encode(data.target_ids.clone(), &data.encoders)?;
    evaluate(&model, data.encoders.text.as_ref(), target.features.view(), labels)
}
