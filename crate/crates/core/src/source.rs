//! Few-shot prompt learning on the labeled source split.
//!
//! One learnable token per class is appended to the fixed "a photo of a"
//! prefix and pushed through the frozen text encoder. The resulting class
//! text features are optimized with cross-entropy on the few labeled source
//! samples and exported, frozen, for the target phase.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis, concatenate, s};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderPair, SampleId, TextEncoder, encode_prompted_text, prompted_sequence};
use crate::error::{CdbnError, Result};
use crate::math::{
    LOG_EPS, content_hash, cosine_matrix, cosine_matrix_backward_weights, softmax_rows,
    softmax_rows_backward,
};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKernel {
    #[default]
    Cosine,
    Dot,
}

impl SimilarityKernel {
    pub fn similarities(
        self,
        image_features: ArrayView2<f64>,
        class_features: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        match self {
            SimilarityKernel::Cosine => cosine_matrix(image_features, class_features),
            SimilarityKernel::Dot => {
                if image_features.ncols() != class_features.ncols() {
                    return Err(CdbnError::shape(
                        "similarities",
                        class_features.ncols(),
                        image_features.ncols(),
                    ));
                }
                Ok(image_features.dot(&class_features.t()))
            }
        }
    }

    fn backward_class_features(
        self,
        image_features: ArrayView2<f64>,
        class_features: ArrayView2<f64>,
        sims: ArrayView2<f64>,
        d_sims: ArrayView2<f64>,
    ) -> Array2<f64> {
        match self {
            SimilarityKernel::Cosine => {
                cosine_matrix_backward_weights(image_features, class_features, sims, d_sims)
            }
            SimilarityKernel::Dot => d_sims.t().dot(&image_features),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    Source,
    Target,
}

/// Per-class text embeddings `[C, D]`, acting as classifier weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTextFeatures {
    pub features: Array2<f64>,
    pub class_names: Vec<String>,
    pub phase: PhaseTag,
    pub frozen: bool,
}

impl ClassTextFeatures {
    pub fn num_classes(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn content_hash(&self) -> String {
        let owned;
        let slice = match self.features.as_slice() {
            Some(s) => s,
            None => {
                owned = self.features.iter().copied().collect::<Vec<_>>();
                &owned
            }
        };
        content_hash([slice])
    }

    pub fn verify_hash(&self, expected: &str) -> Result<()> {
        let found = self.content_hash();
        if found != expected {
            return Err(CdbnError::HashMismatch {
                what: "source class text features",
                expected: expected.to_owned(),
                found,
            });
        }
        Ok(())
    }
}

/// Few labeled source samples: `shots_per_class` per class, drawn with `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSourceSplit {
    pub samples: Vec<(SampleId, usize)>,
    pub num_classes: usize,
    pub shots_per_class: usize,
    pub seed: u64,
    /// Classes with fewer than `shots_per_class` available samples.
    #[serde(default)]
    pub short_classes: Vec<usize>,
}

impl FewShotSourceSplit {
    /// Draws `shots` samples per class from a labeled pool. Deterministic in
    /// `(seed, pool)`; the pool order does not matter.
    pub fn draw(
        pool: &[(SampleId, usize)],
        num_classes: usize,
        shots: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut by_class: BTreeMap<usize, Vec<&SampleId>> = BTreeMap::new();
        for (id, label) in pool {
            if *label >= num_classes {
                return Err(CdbnError::shape("FewShotSourceSplit::draw", num_classes, label));
            }
            by_class.entry(*label).or_default().push(id);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(num_classes * shots);
        let mut short_classes = Vec::new();
        for c in 0..num_classes {
            let mut ids = by_class.remove(&c).ok_or(CdbnError::EmptyClass(c))?;
            ids.sort();
            ids.shuffle(&mut rng);
            if ids.len() < shots {
                warn!("class {c} has only {} source samples (< {shots} shots)", ids.len());
                short_classes.push(c);
            }
            samples.extend(ids.into_iter().take(shots).map(|id| (id.clone(), c)));
        }
        Ok(FewShotSourceSplit {
            samples,
            num_classes,
            shots_per_class: shots,
            seed,
            short_classes,
        })
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.samples.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|(_, c)| *c).collect()
    }
}

/// Softmax over classes of `sim(f_i, g_c) / tau`.
pub fn classify_zero_shot(
    image_features: ArrayView2<f64>,
    class_features: ArrayView2<f64>,
    tau: f64,
    kernel: SimilarityKernel,
) -> Result<Array2<f64>> {
    if !(tau > 0.0) {
        return Err(CdbnError::ConfigInvalid(format!("tau must be positive, got {tau}")));
    }
    let sims = kernel.similarities(image_features, class_features)?;
    Ok(softmax_rows((sims / tau).view()))
}

/// Class features from the fixed prefix plus each class name, with no learning.
pub fn hand_prompt_features(encoder: &dyn TextEncoder, class_names: &[String]) -> Result<ClassTextFeatures> {
    let prefix = encoder.prefix_tokens();
    let mut features = Array2::zeros((class_names.len(), encoder.embed_dim()));
    for (c, name) in class_names.iter().enumerate() {
        let name_tokens = encoder.class_name_tokens(name)?;
        let g = encode_prompted_text(encoder, prefix.view(), name_tokens.view())?;
        features.row_mut(c).assign(&g);
    }
    Ok(ClassTextFeatures {
        features,
        class_names: class_names.to_vec(),
        phase: PhaseTag::Source,
        frozen: true,
    })
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), num_classes));
    for (i, &c) in labels.iter().enumerate() {
        y[[i, c]] = 1.0;
    }
    y
}

/// `-(1/B) sum_i sum_c y_ic log p_ic`.
pub fn source_cross_entropy(probs: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<f64> {
    if probs.dim() != labels.dim() {
        return Err(CdbnError::shape(
            "source_cross_entropy",
            format!("{:?}", probs.dim()),
            format!("{:?}", labels.dim()),
        ));
    }
    let b = probs.nrows() as f64;
    let sum: f64 = probs
        .iter()
        .zip(labels.iter())
        .map(|(&p, &y)| if y == 0.0 { 0.0 } else { y * (p + LOG_EPS).ln() })
        .sum();
    Ok((-sum / b).max(0.0))
}

pub(crate) fn cross_entropy_grad(probs: ArrayView2<f64>, labels: ArrayView2<f64>) -> Array2<f64> {
    let b = probs.nrows() as f64;
    let mut d = Array2::zeros(probs.raw_dim());
    ndarray::Zip::from(&mut d)
        .and(probs)
        .and(labels)
        .for_each(|d, &p, &y| *d = -y / (b * (p + LOG_EPS)));
    d
}

/// The `[C, D_token]` learnable class-specific tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnableClassTokens {
    pub tokens: Array2<f64>,
}

impl LearnableClassTokens {
    pub const REGISTRY_NAME: &'static str = "V_L";

    /// Zero-mean Gaussian init with std 0.02.
    pub fn init(num_classes: usize, token_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7372_635f_746f_6b);
        let n = Normal::new(0.0, 0.02).expect("valid normal");
        LearnableClassTokens {
            tokens: Array2::from_shape_fn((num_classes, token_dim), |_| n.sample(&mut rng)),
        }
    }

    fn sequence(&self, encoder: &dyn TextEncoder, prefix: ArrayView2<f64>, c: usize) -> Result<Array2<f64>> {
        prompted_sequence(encoder, prefix, self.tokens.slice(s![c..c + 1, ..]))
    }

    /// Encodes `[prefix, V_c]` for every class into `G^S`.
    pub fn class_features(&self, encoder: &dyn TextEncoder) -> Result<Array2<f64>> {
        let prefix = encoder.prefix_tokens();
        let rows = (0..self.tokens.nrows())
            .map(|c| {
                let seq = self.sequence(encoder, prefix.view(), c)?;
                Ok(encoder.encode_tokens(seq.view())?.insert_axis(Axis(0)))
            })
            .collect::<Result<Vec<Array2<f64>>>>()?;
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| CdbnError::shape("class_features", "rows", e))
    }
}

/// Source-phase loss together with its gradient w.r.t. the class tokens.
pub fn source_loss_and_grad(
    tokens: &LearnableClassTokens,
    encoder: &dyn TextEncoder,
    image_features: ArrayView2<f64>,
    labels: &[usize],
    tau: f64,
    kernel: SimilarityKernel,
) -> Result<(f64, Array2<f64>)> {
    let c = tokens.tokens.nrows();
    let prefix = encoder.prefix_tokens();
    let g = tokens.class_features(encoder)?;
    let sims = kernel.similarities(image_features, g.view())?;
    let probs = softmax_rows((&sims / tau).view());
    let y = one_hot(labels, c);
    let loss = source_cross_entropy(probs.view(), y.view())?;

    let dp = cross_entropy_grad(probs.view(), y.view());
    let dz = softmax_rows_backward(probs.view(), dp.view()) / tau;
    let dg = kernel.backward_class_features(image_features, g.view(), sims.view(), dz.view());
    let mut grad = Array2::zeros(tokens.tokens.raw_dim());
    for class in 0..c {
        let seq = tokens.sequence(encoder, prefix.view(), class)?;
        let dseq = encoder.encode_tokens_backward(seq.view(), dg.row(class))?;
        // the class token is the last position of the sequence
        grad.row_mut(class).assign(&dseq.row(dseq.nrows() - 1));
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub kernel: SimilarityKernel,
    pub optimizer: AdamConfig,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            epochs: 200,
            lr: 1e-3,
            tau: 1.0,
            kernel: SimilarityKernel::Cosine,
            optimizer: AdamConfig::default(),
            batch_size: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SourceTrainingOutcome {
    pub class_features: ClassTextFeatures,
    pub tokens: LearnableClassTokens,
    /// Full-split loss before training, then after each epoch.
    pub loss_history: Vec<f64>,
    /// Parameter names the optimizer updated.
    pub registry: Vec<String>,
}

/// Optimizes one token per class on the few-shot split and exports frozen `G^S`.
pub fn train_source_prompts(
    split: &FewShotSourceSplit,
    encoders: &EncoderPair,
    class_names: &[String],
    config: &SourceTrainConfig,
) -> Result<SourceTrainingOutcome> {
    let c = split.num_classes;
    if class_names.len() != c {
        return Err(CdbnError::shape("train_source_prompts", c, class_names.len()));
    }
    let labels = split.labels();
    for class in 0..c {
        if !labels.contains(&class) {
            return Err(CdbnError::EmptyClass(class));
        }
    }
    let features = encoders.image.encode_images(&split.ids())?;
    let text = encoders.text.as_ref();
    let mut tokens = LearnableClassTokens::init(c, text.token_dim(), split.seed);
    let mut opt = Adam::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed ^ 0x6261_7463_68);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let batch = if config.batch_size == 0 {
        labels.len()
    } else {
        config.batch_size
    };

    let full_loss = |tokens: &LearnableClassTokens| -> Result<f64> {
        let (l, _) = source_loss_and_grad(tokens, text, features.view(), &labels, config.tau, config.kernel)?;
        if !l.is_finite() {
            return Err(CdbnError::DivergedLoss(l));
        }
        Ok(l)
    };
    let mut loss_history = vec![full_loss(&tokens)?];
    for _ in 0..config.epochs {
        if batch < labels.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let xb = features.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) =
                source_loss_and_grad(&tokens, text, xb.view(), &yb, config.tau, config.kernel)?;
            if !loss.is_finite() {
                return Err(CdbnError::DivergedLoss(loss));
            }
            opt.begin_step();
            opt.update(
                LearnableClassTokens::REGISTRY_NAME,
                tokens.tokens.as_slice_mut().expect("contiguous"),
                grad.as_slice().expect("contiguous"),
                config.lr,
            );
        }
        loss_history.push(full_loss(&tokens)?);
    }

    let g = tokens.class_features(text)?;
    Ok(SourceTrainingOutcome {
        class_features: ClassTextFeatures {
            features: g,
            class_names: class_names.to_vec(),
            phase: PhaseTag::Source,
            frozen: true,
        },
        tokens,
        loss_history,
        registry: opt.registered().map(str::to_owned).collect(),
    })
}

/// Accuracy of `argmax` over class similarities against integer labels.
pub fn nearest_class_accuracy(
    image_features: ArrayView2<f64>,
    class_features: ArrayView2<f64>,
    labels: &[usize],
    kernel: SimilarityKernel,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(CdbnError::EmptyEvalSet);
    }
    let sims = kernel.similarities(image_features, class_features)?;
    let correct = sims
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| crate::math::argmax(*row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Per-class mean of the given features, `[C, D]`.
pub fn class_means(features: ArrayView2<f64>, labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut sums = Array2::zeros((num_classes, features.ncols()));
    let mut counts = Array1::<f64>::zeros(num_classes);
    for (row, &y) in features.axis_iter(Axis(0)).zip(labels) {
        let mut dst = sums.row_mut(y);
        dst += &row;
        counts[y] += 1.0;
    }
    for (mut row, n) in sums.axis_iter_mut(Axis(0)).zip(counts.iter()) {
        if *n > 0.0 {
            row /= *n;
        }
    }
    sums
}
