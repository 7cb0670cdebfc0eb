//! Target-phase training loop.
//!
//! Only the dual-branch arrays `W1`, `W2`, `W3`, `T_t` and (optionally) `W_e`
//! are registered with the optimizer. Encoders are reached through immutable
//! trait objects and `G^S` is hash-checked after every epoch.

use std::path::Path;

use log::{debug, info};
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{HighConfidenceSet, build_feature_bank, records_from_probs, select_top_k};
use crate::branch::{DualBranchModel, HeadGrads, ParamGrads};
use crate::checkpoint::{DualBranchCheckpoint, write_metrics_log};
use crate::config::{AdaptationConfig, CheckpointMode};
use crate::encoder::{EncoderPair, SampleId, TextEncoder};
use crate::error::{CdbnError, Result};
use crate::math::argmax;
use crate::objectives::{
    LossBreakdown, LossSwitches, consistency_loss, information_maximization_grad,
    information_maximization_loss, pseudo_label_ce, pseudo_label_ce_grad, total_loss,
};
use crate::optim::{Adam, CosineAnnealing};
use crate::source::one_hot;

/// Target samples, encoded once by the frozen image encoder.
#[derive(Clone, Debug)]
pub struct TargetSet {
    pub ids: Vec<SampleId>,
    pub features: Array2<f64>,
}

impl TargetSet {
    pub fn encode(ids: Vec<SampleId>, encoders: &EncoderPair) -> Result<Self> {
        if ids.is_empty() {
            return Err(CdbnError::EmptyEvalSet);
        }
        let features = encoders.image.encode_images(&ids)?;
        Ok(TargetSet { ids, features })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The fixed pseudo-labeled subset used by the pseudo-label cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledSubset {
    /// Row indices into the [`TargetSet`].
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl PseudoLabeledSubset {
    pub fn from_high_confidence(set: &HighConfidenceSet, target: &TargetSet) -> Result<Self> {
        let mut indices = Vec::with_capacity(set.len());
        let mut labels = Vec::with_capacity(set.len());
        for r in set.records() {
            let idx = target
                .ids
                .iter()
                .position(|id| *id == r.sample_id)
                .ok_or_else(|| CdbnError::UnknownSample(r.sample_id.to_string()))?;
            indices.push(idx);
            labels.push(r.pseudo_class);
        }
        Ok(PseudoLabeledSubset { indices, labels })
    }
}

/// Cycles through the pseudo-labeled subset, optionally round-robin over classes.
struct PseudoLoader {
    queues: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    next_class: usize,
    balanced: bool,
}

impl PseudoLoader {
    fn new(subset: &PseudoLabeledSubset, num_classes: usize, balanced: bool, rng: &mut ChaCha8Rng) -> Self {
        let queues = if balanced {
            let mut q = vec![Vec::new(); num_classes];
            for (pos, &label) in subset.labels.iter().enumerate() {
                q[label].push(pos);
            }
            q.retain(|v| !v.is_empty());
            q
        } else {
            vec![(0..subset.labels.len()).collect()]
        };
        let mut loader = PseudoLoader {
            cursors: vec![0; queues.len()],
            queues,
            next_class: 0,
            balanced,
        };
        for q in loader.queues.iter_mut() {
            q.shuffle(rng);
        }
        loader
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.queues.is_empty() {
            let q = if self.balanced {
                let q = self.next_class;
                self.next_class = (self.next_class + 1) % self.queues.len();
                q
            } else {
                0
            };
            if self.cursors[q] == self.queues[q].len() {
                self.queues[q].shuffle(rng);
                self.cursors[q] = 0;
            }
            out.push(self.queues[q][self.cursors[q]]);
            self.cursors[q] += 1;
        }
        out
    }
}

/// Inputs for one optimizer step.
#[derive(Clone, Debug)]
pub struct StepBatch {
    /// Weak view of a pseudo-labeled batch.
    pub pseudo_features: Array2<f64>,
    pub pseudo_labels: Vec<usize>,
    /// Weak and strong views of a target batch.
    pub weak: Array2<f64>,
    pub strong: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub masked_fraction: f64,
    pub grads: ParamGrads,
}

/// Loss terms and parameter gradients for one step. The weak-view prediction
/// enters the consistency term only as a constant target.
pub fn step_loss_and_grads(
    model: &DualBranchModel,
    text: &dyn TextEncoder,
    batch: &StepBatch,
    switches: LossSwitches,
    theta: f64,
) -> Result<StepOutput> {
    let c = model.num_classes();
    let d = model.source().dim();
    let heads = model.class_heads(text)?;
    let mut acc = HeadGrads::zeros(c, d);

    let mut ce = 0.0;
    if switches.ce && !batch.pseudo_labels.is_empty() {
        let pred = model.predict(&heads, batch.pseudo_features.view())?;
        let y = one_hot(&batch.pseudo_labels, c);
        ce = pseudo_label_ce(pred.probs.view(), y.view())?;
        let dp = pseudo_label_ce_grad(pred.probs.view(), y.view());
        model.backward_batch(&heads, batch.pseudo_features.view(), &pred, dp.view(), &mut acc);
    }

    let mut im = 0.0;
    let mut cons = 0.0;
    let mut masked_fraction = 0.0;
    if switches.im || switches.consistency {
        let weak = model.predict(&heads, batch.weak.view())?;
        if switches.im {
            im = information_maximization_loss(weak.probs.view())?;
            let dp = information_maximization_grad(weak.probs.view());
            model.backward_batch(&heads, batch.weak.view(), &weak, dp.view(), &mut acc);
        }
        if switches.consistency {
            let strong = model.predict(&heads, batch.strong.view())?;
            let term = consistency_loss(weak.probs.view(), strong.probs.view(), theta)?;
            cons = term.loss;
            masked_fraction = term.masked_fraction();
            let dp = term.grad_strong(strong.probs.view());
            model.backward_batch(&heads, batch.strong.view(), &strong, dp.view(), &mut acc);
        }
    }

    let losses = total_loss(ce, cons, im)?;
    let grads = model.backward_heads(&heads, text, &acc)?;
    Ok(StepOutput {
        losses,
        masked_fraction,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Accuracy of the transfer branch alone (argmax of `l_f`).
    pub transfer_accuracy: f64,
    /// Accuracy of the target branch alone (argmax of `l_g`).
    pub target_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Fused-argmax accuracy against held-out labels. Does not touch parameters.
pub fn evaluate(
    model: &DualBranchModel,
    text: &dyn TextEncoder,
    features: ArrayView2<f64>,
    labels: &[usize],
) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(CdbnError::EmptyEvalSet);
    }
    if labels.len() != features.nrows() {
        return Err(CdbnError::shape("evaluate", features.nrows(), labels.len()));
    }
    let pred = model.forward(text, features)?;
    let (lf, lg, fused) = DualBranchModel::branch_argmax(&pred);
    Ok(score_predictions(&fused, labels, model.num_classes(), Some((&lf, &lg))))
}

/// Accuracy, per-class accuracy and confusion counts of integer predictions.
pub fn score_predictions(
    predicted: &[usize],
    labels: &[usize],
    num_classes: usize,
    branches: Option<(&[usize], &[usize])>,
) -> EvalReport {
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let hits = |pred: &[usize]| pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 { 0.0 } else { row[c] as f64 / n as f64 }
        })
        .collect();
    let (transfer_accuracy, target_accuracy) = match branches {
        Some((lf, lg)) => (hits(lf), hits(lg)),
        None => (f64::NAN, f64::NAN),
    };
    EvalReport {
        accuracy: hits(predicted),
        per_class_accuracy,
        transfer_accuracy,
        target_accuracy,
        confusion,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub ce_pseudo: f64,
    pub consistency: f64,
    pub im: f64,
    pub total: f64,
    pub masked_fraction: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct AdaptationOutcome {
    /// Kept model: best epoch in benchmark mode, last epoch otherwise.
    pub model: DualBranchModel,
    pub kept_epoch: usize,
    pub initial_eval: Option<EvalReport>,
    pub final_eval: Option<EvalReport>,
    pub step_history: Vec<StepMetrics>,
    pub epoch_history: Vec<EpochMetrics>,
    /// Names of every array the optimizer updated.
    pub registry: Vec<String>,
    pub learning_rates: Vec<f64>,
}

impl AdaptationOutcome {
    pub fn kept_accuracy(&self) -> Option<f64> {
        self.epoch_history
            .iter()
            .find(|e| e.epoch == self.kept_epoch)
            .and_then(|e| e.eval.as_ref())
            .map(|e| e.accuracy)
    }
}

fn apply_grads(model: &mut DualBranchModel, opt: &mut Adam, grads: &ParamGrads, lr: f64) {
    let grad_slices = DualBranchModel::grad_slices(grads);
    opt.begin_step();
    for (name, param) in model.trainable_params_mut() {
        let (_, g) = grad_slices
            .iter()
            .find(|(n, _)| *n == name)
            .expect("gradient for every trainable array");
        opt.update(name, param, g, lr);
    }
}

/// Trains the dual-branch model on the unlabeled target set.
///
/// `eval_labels` is only read to score epochs and, in benchmark mode, to pick
/// the kept checkpoint. `checkpoint_dir`, when given, receives the kept
/// checkpoint, the metrics log, and on a non-finite loss the last good state.
pub fn run_adaptation(
    mut model: DualBranchModel,
    encoders: &EncoderPair,
    target: &TargetSet,
    pseudo: &PseudoLabeledSubset,
    eval_labels: Option<&[usize]>,
    config: &AdaptationConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<AdaptationOutcome> {
    config.validate()?;
    model.verify_source()?;
    let text = encoders.text.as_ref();
    let a = &config.adaptation;
    let switches = config.objectives.losses;
    let augment = config.objectives.augment;
    let c = model.num_classes();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6164_6170_74);
    let mut pseudo = pseudo.clone();
    let mut loader = PseudoLoader::new(&pseudo, c, a.class_balanced_pseudo, &mut rng);
    let steps_per_epoch = target.len().div_ceil(a.batch_size);
    let schedule = CosineAnnealing {
        base_lr: a.lr,
        floor: a.lr_floor,
        total_steps: steps_per_epoch * a.epochs,
    };
    let mut opt = Adam::new(a.adam());

    let eval = |m: &DualBranchModel| -> Result<Option<EvalReport>> {
        eval_labels
            .map(|y| evaluate(m, text, target.features.view(), y))
            .transpose()
    };
    let initial_eval = eval(&model)?;
    let mut epoch_history = vec![EpochMetrics {
        epoch: 0,
        mean_total_loss: f64::NAN,
        eval: initial_eval.clone(),
    }];
    let mut kept = model.clone();
    let mut kept_epoch = 0;
    let mut best_acc = initial_eval.as_ref().map_or(f64::NEG_INFINITY, |e| e.accuracy);
    let mut step_history = Vec::with_capacity(steps_per_epoch * a.epochs);
    let mut learning_rates = Vec::with_capacity(steps_per_epoch * a.epochs);
    let mut order: Vec<usize> = (0..target.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=a.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(a.batch_size) {
            let x = target.features.select(Axis(0), chunk);
            let picks = loader.next_batch(a.batch_size, &mut rng);
            let rows: Vec<usize> = picks.iter().map(|&p| pseudo.indices[p]).collect();
            let batch = StepBatch {
                pseudo_features: augment.weak(target.features.select(Axis(0), &rows).view(), &mut rng),
                pseudo_labels: picks.iter().map(|&p| pseudo.labels[p]).collect(),
                weak: augment.weak(x.view(), &mut rng),
                strong: augment.strong(x.view(), &mut rng),
            };
            let out = match step_loss_and_grads(&model, text, &batch, switches, config.objectives.theta_t) {
                Ok(o) => o,
                Err(e @ CdbnError::NonFiniteLoss { .. }) => {
                    if let Some(dir) = checkpoint_dir {
                        DualBranchCheckpoint::from_model(&kept, kept_epoch).save(&dir.join("last_good.json"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let lr = schedule.lr(step);
            apply_grads(&mut model, &mut opt, &out.grads, lr);
            epoch_loss += out.losses.total;
            learning_rates.push(lr);
            step_history.push(StepMetrics {
                step,
                ce_pseudo: out.losses.ce_pseudo,
                consistency: out.losses.consistency,
                im: out.losses.im,
                total: out.losses.total,
                masked_fraction: out.masked_fraction,
                lr,
            });
            step += 1;
        }
        model.verify_source()?;

        if config.bank.refresh_every > 0 && epoch % config.bank.refresh_every == 0 && epoch < a.epochs {
            let probs = model.forward(text, target.features.view())?.probs;
            let records = records_from_probs(&target.ids, probs.view());
            let set = select_top_k(&records, c, config.bank.k)?;
            model.bank = build_feature_bank(&set, encoders.image.as_ref(), model.bank.trainable)?;
            pseudo = PseudoLabeledSubset::from_high_confidence(&set, target)?;
            loader = PseudoLoader::new(&pseudo, c, a.class_balanced_pseudo, &mut rng);
            debug!("epoch {epoch}: bank refreshed");
        }

        let report = eval(&model)?;
        let mean_total_loss = epoch_loss / steps_per_epoch as f64;
        match (&report, config.adaptation.checkpoint_mode) {
            (Some(r), CheckpointMode::Benchmark) => {
                if r.accuracy > best_acc {
                    best_acc = r.accuracy;
                    kept = model.clone();
                    kept_epoch = epoch;
                }
            }
            _ => {
                kept = model.clone();
                kept_epoch = epoch;
            }
        }
        info!(
            "epoch {epoch}/{}: loss {mean_total_loss:.4}{}",
            a.epochs,
            report
                .as_ref()
                .map(|r| format!(", acc {:.4}", r.accuracy))
                .unwrap_or_default()
        );
        epoch_history.push(EpochMetrics {
            epoch,
            mean_total_loss,
            eval: report,
        });
    }

    let final_eval = eval(&kept)?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        DualBranchCheckpoint::from_model(&kept, kept_epoch).save(&dir.join("model.json"))?;
        write_metrics_log(&dir.join("metrics.csv"), &step_history)?;
    }
    Ok(AdaptationOutcome {
        model: kept,
        kept_epoch,
        initial_eval,
        final_eval,
        step_history,
        epoch_history,
        registry: opt.registered().map(str::to_owned).collect(),
        learning_rates,
    })
}

/// Fused predictions on the full target set, as integer classes.
pub fn predict_classes(model: &DualBranchModel, text: &dyn TextEncoder, features: ArrayView2<f64>) -> Result<Vec<usize>> {
    let pred = model.forward(text, features)?;
    Ok(pred.probs.axis_iter(Axis(0)).map(argmax).collect())
}

/// Per-seed accuracies and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seeds: Vec<u64>,
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Accuracy of `G^S` alone on the target set, per seed.
    pub source_only_accuracy: Vec<f64>,
    pub loss_history: Vec<Vec<StepMetrics>>,
    pub checkpoints: Vec<std::path::PathBuf>,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoring_counts() {
        let r = score_predictions(&[0, 0, 1, 1], &[0, 0, 1, 1], 2, None);
        assert_eq!(r.accuracy, 1.0);
        let r = score_predictions(&[0, 0, 0, 0], &[0, 0, 1, 1], 2, None);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_class_accuracy, vec![1.0, 0.0]);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn balanced_loader_round_robins_classes() {
        let subset = PseudoLabeledSubset {
            indices: (0..6).collect(),
            labels: vec![0, 0, 0, 0, 1, 2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut loader = PseudoLoader::new(&subset, 3, true, &mut rng);
        let batch = loader.next_batch(6, &mut rng);
        let mut counts = [0; 3];
        for p in batch {
            counts[subset.labels[p]] += 1;
        }
        assert_eq!(counts, [2, 2, 2]);
    }

    #[test]
    fn mean_of_seeds() {
        assert!((mean(&[0.77, 0.78, 0.79]) - 0.78).abs() < 1e-12);
    }
}
