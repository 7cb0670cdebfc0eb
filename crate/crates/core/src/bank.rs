//! Pseudo-labels from the frozen source class features, per-class top-K
//! selection, and the learnable target feature bank built from it.

use log::warn;
use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{ImageEncoder, SampleId};
use crate::error::{CdbnError, Result};
use crate::math::{argmax, content_hash};
use crate::source::{ClassTextFeatures, PhaseTag, SimilarityKernel, classify_zero_shot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub sample_id: SampleId,
    pub pseudo_class: usize,
    pub confidence: f64,
}

/// Labels every target sample with the argmax class under the source features,
/// scoring it with that class's probability.
pub fn assign_pseudo_labels(
    sample_ids: &[SampleId],
    target_features: ArrayView2<f64>,
    source_features: &ClassTextFeatures,
    tau: f64,
    kernel: SimilarityKernel,
) -> Result<Vec<PseudoLabelRecord>> {
    if source_features.phase != PhaseTag::Source {
        return Err(CdbnError::ConfigInvalid(
            "pseudo-labels must come from source-phase class features".into(),
        ));
    }
    if sample_ids.len() != target_features.nrows() {
        return Err(CdbnError::shape(
            "assign_pseudo_labels",
            target_features.nrows(),
            sample_ids.len(),
        ));
    }
    let probs = classify_zero_shot(
        target_features,
        source_features.features.view(),
        tau,
        kernel,
    )?;
    Ok(records_from_probs(sample_ids, probs.view()))
}

pub(crate) fn records_from_probs(
    sample_ids: &[SampleId],
    probs: ArrayView2<f64>,
) -> Vec<PseudoLabelRecord> {
    probs
        .axis_iter(Axis(0))
        .zip(sample_ids)
        .map(|(row, id)| {
            let c = argmax(row);
            PseudoLabelRecord {
                sample_id: id.clone(),
                pseudo_class: c,
                confidence: row[c],
            }
        })
        .collect()
}

/// Per-class lists of the K most confident records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighConfidenceSet {
    pub k: usize,
    pub per_class: Vec<Vec<PseudoLabelRecord>>,
    /// Classes that had fewer than `k` records.
    pub saturated_classes: Vec<usize>,
}

impl HighConfidenceSet {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All selected records, class by class.
    pub fn records(&self) -> impl Iterator<Item = &PseudoLabelRecord> {
        self.per_class.iter().flatten()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        self.per_class.iter().map(Vec::len).collect()
    }
}

/// Partitions records by pseudo-class and keeps the `k` highest-confidence
/// records of each class. Equal confidences keep input order.
pub fn select_top_k(
    records: &[PseudoLabelRecord],
    num_classes: usize,
    k: usize,
) -> Result<HighConfidenceSet> {
    if records.is_empty() {
        return Err(CdbnError::EmptyRecordList);
    }
    if k == 0 {
        return Err(CdbnError::ConfigInvalid("K must be at least 1".into()));
    }
    let mut per_class: Vec<Vec<PseudoLabelRecord>> = vec![Vec::new(); num_classes];
    for r in records {
        let bucket = per_class
            .get_mut(r.pseudo_class)
            .ok_or_else(|| CdbnError::shape("select_top_k", num_classes, r.pseudo_class))?;
        bucket.push(r.clone());
    }
    let mut saturated_classes = Vec::new();
    for (c, bucket) in per_class.iter_mut().enumerate() {
        // stable sort keeps input order among equal confidences
        bucket.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        if bucket.len() < k {
            warn!(
                "class {c}: only {} pseudo-labeled samples for K = {k}",
                bucket.len()
            );
            saturated_classes.push(c);
        }
        bucket.truncate(k);
    }
    Ok(HighConfidenceSet {
        k,
        per_class,
        saturated_classes,
    })
}

/// Global top-(C*K) selection by confidence, ignoring classes. Kept for
/// comparison against [`select_top_k`].
pub fn select_top_global(records: &[PseudoLabelRecord], count: usize) -> Vec<PseudoLabelRecord> {
    let mut all = records.to_vec();
    all.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    all.truncate(count);
    all
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankSlot {
    pub sample_id: SampleId,
    pub confidence: f64,
    /// True when this slot replicates an earlier entry to fill a short class.
    pub padded: bool,
}

/// The `[C, K, D]` target feature bank `W_e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub values: Array3<f64>,
    pub slots: Vec<Vec<BankSlot>>,
    pub trainable: bool,
}

impl FeatureBank {
    pub fn num_classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn checksum(&self) -> String {
        content_hash([self.values.as_slice().expect("contiguous")])
    }
}

/// Encodes the selected samples into `W_e`. A class with `m < K` selections
/// repeats its lowest-confidence entry to fill the remaining slots.
pub fn build_feature_bank(
    set: &HighConfidenceSet,
    encoder: &dyn ImageEncoder,
    trainable: bool,
) -> Result<FeatureBank> {
    let c = set.num_classes();
    let k = set.k;
    let d = encoder.embed_dim();
    let mut values = Array3::zeros((c, k, d));
    let mut slots = Vec::with_capacity(c);
    for (class, records) in set.per_class.iter().enumerate() {
        if records.is_empty() {
            return Err(CdbnError::EmptyClass(class));
        }
        let ids: Vec<SampleId> = records.iter().map(|r| r.sample_id.clone()).collect();
        let feats = encoder.encode_images(&ids)?;
        let mut class_slots = Vec::with_capacity(k);
        for slot in 0..k {
            let src = slot.min(records.len() - 1);
            values
                .index_axis_mut(Axis(0), class)
                .row_mut(slot)
                .assign(&feats.row(src));
            class_slots.push(BankSlot {
                sample_id: records[src].sample_id.clone(),
                confidence: records[src].confidence,
                padded: slot >= records.len(),
            });
        }
        slots.push(class_slots);
    }
    Ok(FeatureBank {
        values,
        slots,
        trainable,
    })
}
