//! Dual-branch prediction head.
//!
//! * Transfer branch: the frozen source class features `G^S` attend over the
//!   target feature bank `W_e` through a residual cross-attention, giving
//!   `W_g* = G^S + gate ⊙ A`, scored against images by cosine similarity.
//! * Target branch: a class-shared learnable prompt `T_t`, followed by the
//!   class-name token, is encoded by the frozen text encoder into `g^T`.
//! * Fusion: `softmax(s * (alpha_fuse * l_f + (1 - alpha_fuse) * l_g))`.
//!
//! The backward passes here are written by hand; see the gradient suites
//! under `tests/` for the finite-difference checks.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, s};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::bank::FeatureBank;
use crate::encoder::{TextEncoder, prompted_sequence};
use crate::error::{CdbnError, Result};
use crate::math::{cosine_matrix, cosine_matrix_backward_weights, softmax, softmax_rows};
use crate::source::ClassTextFeatures;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    /// Each class attends only over its own K bank entries.
    #[default]
    PerClass,
    /// Each class attends over all C*K bank entries.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// `W3: D -> 1`, one scalar per class.
    #[default]
    Scalar,
    /// `W3: D -> D`, an elementwise gate per class.
    Vector,
}

/// Learnable maps of the residual cross-attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionFusion {
    /// Query projection `[D, D_a]`.
    pub w1: Array2<f64>,
    /// Key projection `[D, D_a]`.
    pub w2: Array2<f64>,
    /// Residual gate `[D, 1]` (scalar) or `[D, D]` (vector).
    pub w3: Array2<f64>,
    pub scope: AttentionScope,
}

impl CrossAttentionFusion {
    /// `W1`, `W2` uniform in `±1/sqrt(D)`; `W3` zero so that `W_g* = G^S` at start.
    pub fn init(dim: usize, scope: AttentionScope, gate: GateKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6675_7369_6f6e);
        let bound = 1.0 / (dim as f64).sqrt();
        let u = Uniform::new(-bound, bound).expect("valid bounds");
        let w1 = Array2::from_shape_fn((dim, dim), |_| u.sample(&mut rng));
        let w2 = Array2::from_shape_fn((dim, dim), |_| u.sample(&mut rng));
        let gate_dim = match gate {
            GateKind::Scalar => 1,
            GateKind::Vector => dim,
        };
        CrossAttentionFusion {
            w1,
            w2,
            w3: Array2::zeros((dim, gate_dim)),
            scope,
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.w1.ncols()
    }

    fn key_range(&self, class: usize, k: usize, total: usize) -> std::ops::Range<usize> {
        match self.scope {
            AttentionScope::PerClass => class * k..(class + 1) * k,
            AttentionScope::Global => 0..total,
        }
    }
}

/// Intermediate values of [`fuse_class_features`], kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FusionForward {
    pub wg_star: Array2<f64>,
    /// `[C, C*K]`; entries outside a class's key range are zero.
    pub attention: Array2<f64>,
    pub attended: Array2<f64>,
    /// Residual gate per class, `[C, 1]` or `[C, D]`.
    pub gates: Array2<f64>,
    queries: Array2<f64>,
    keys: Array2<f64>,
    bank_flat: Array2<f64>,
}

fn flatten_bank(bank: ArrayView3<f64>) -> Array2<f64> {
    let (c, k, d) = bank.dim();
    bank.to_owned()
        .into_shape_with_order((c * k, d))
        .expect("contiguous bank")
}

/// `W_g*[c] = G^S[c] + gate_c ⊙ A[c]`, where `A[c]` is the softmax-weighted
/// average of bank entries scored by `(G^S[c] W1) · (W_e W2)^T / sqrt(D_a)`.
pub fn fuse_class_features(
    source: ArrayView2<f64>,
    bank: ArrayView3<f64>,
    fusion: &CrossAttentionFusion,
) -> Result<FusionForward> {
    let (c, d) = source.dim();
    let (bc, k, bd) = bank.dim();
    if bc != c || bd != d || fusion.w1.nrows() != d || fusion.w2.nrows() != d || fusion.w3.nrows() != d {
        return Err(CdbnError::shape(
            "fuse_class_features",
            format!("G^S [{c}, {d}], W_e [{c}, K, {d}], W1/W2/W3 rows {d}"),
            format!(
                "W_e {:?}, W1 {:?}, W2 {:?}, W3 {:?}",
                bank.dim(),
                fusion.w1.dim(),
                fusion.w2.dim(),
                fusion.w3.dim()
            ),
        ));
    }
    if fusion.w3.ncols() != 1 && fusion.w3.ncols() != d {
        return Err(CdbnError::shape("fuse_class_features", "W3 width 1 or D", fusion.w3.ncols()));
    }
    let flat = flatten_bank(bank);
    let queries = source.dot(&fusion.w1);
    let keys = flat.dot(&fusion.w2);
    let scale = (fusion.attention_dim() as f64).sqrt();
    let mut attention = Array2::zeros((c, c * k));
    for class in 0..c {
        let range = fusion.key_range(class, k, c * k);
        let scores = keys.slice(s![range.clone(), ..]).dot(&queries.row(class)) / scale;
        attention
            .slice_mut(s![class, range])
            .assign(&softmax(scores.view()));
    }
    let attended = attention.dot(&flat);
    let gates = source.dot(&fusion.w3);
    let mut wg_star = source.to_owned();
    for class in 0..c {
        let mut row = wg_star.row_mut(class);
        if gates.ncols() == 1 {
            row.scaled_add(gates[[class, 0]], &attended.row(class));
        } else {
            row += &(&gates.row(class) * &attended.row(class));
        }
    }
    Ok(FusionForward {
        wg_star,
        attention,
        attended,
        gates,
        queries,
        keys,
        bank_flat: flat,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionGrads {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub w3: Array2<f64>,
    pub bank: Array3<f64>,
}

/// Backward of [`fuse_class_features`] given `dL/dW_g*`. `G^S` gets nothing.
pub fn fuse_class_features_backward(
    source: ArrayView2<f64>,
    bank_shape: (usize, usize, usize),
    fusion: &CrossAttentionFusion,
    fwd: &FusionForward,
    d_wg: ArrayView2<f64>,
) -> FusionGrads {
    let (c, k, d) = bank_shape;
    let scalar = fwd.gates.ncols() == 1;
    let mut d_gates = Array2::zeros(fwd.gates.raw_dim());
    let mut d_attended = Array2::zeros(fwd.attended.raw_dim());
    for class in 0..c {
        let dw = d_wg.row(class);
        let a = fwd.attended.row(class);
        if scalar {
            d_gates[[class, 0]] = dw.dot(&a);
            d_attended.row_mut(class).assign(&(&dw * fwd.gates[[class, 0]]));
        } else {
            d_gates.row_mut(class).assign(&(&dw * &a));
            d_attended
                .row_mut(class)
                .assign(&(&dw * &fwd.gates.row(class)));
        }
    }
    let w3 = source.t().dot(&d_gates);

    let d_attention = d_attended.dot(&fwd.bank_flat.t());
    let mut d_flat = fwd.attention.t().dot(&d_attended);

    let scale = (fusion.attention_dim() as f64).sqrt();
    let mut d_scores = Array2::<f64>::zeros(fwd.attention.raw_dim());
    for class in 0..c {
        let range = fusion.key_range(class, k, c * k);
        let a = fwd.attention.slice(s![class, range.clone()]);
        let da = d_attention.slice(s![class, range.clone()]);
        let inner = a.dot(&da);
        d_scores
            .slice_mut(s![class, range])
            .assign(&(&a * &(&da - inner)));
    }
    let d_queries = d_scores.dot(&fwd.keys) / scale;
    let d_keys = d_scores.t().dot(&fwd.queries) / scale;
    let w1 = source.t().dot(&d_queries);
    let w2 = fwd.bank_flat.t().dot(&d_keys);
    d_flat += &d_keys.dot(&fusion.w2.t());

    FusionGrads {
        w1,
        w2,
        w3,
        bank: d_flat
            .into_shape_with_order((c, k, d))
            .expect("bank gradient shape"),
    }
}

/// Cosine logits of the transfer branch, `[B, C]`.
pub fn transfer_branch_logits(image_features: ArrayView2<f64>, wg_star: ArrayView2<f64>) -> Result<Array2<f64>> {
    cosine_matrix(image_features, wg_star)
}

/// Class-shared learnable context tokens `T_t`, `[M, D_token]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPromptSequence {
    pub tokens: Array2<f64>,
}

impl SoftPromptSequence {
    pub fn init(m: usize, token_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6d_7074);
        let n = Normal::new(0.0, 0.02).expect("valid normal");
        SoftPromptSequence {
            tokens: Array2::from_shape_fn((m, token_dim), |_| n.sample(&mut rng)),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Target-branch class text features `g^T` with the token sequences that produced them.
#[derive(Clone, Debug)]
pub struct TargetTextFeatures {
    pub features: Array2<f64>,
    sequences: Vec<Array2<f64>>,
}

pub fn target_text_features(
    prompt: &SoftPromptSequence,
    text: &dyn TextEncoder,
    class_names: &[String],
    include_class_name: bool,
) -> Result<TargetTextFeatures> {
    let mut features = Array2::zeros((class_names.len(), text.embed_dim()));
    let mut sequences = Vec::with_capacity(class_names.len());
    for (c, name) in class_names.iter().enumerate() {
        let seq = if include_class_name {
            let name_tokens = text.class_name_tokens(name)?;
            prompted_sequence(text, prompt.tokens.view(), name_tokens.view())?
        } else {
            prompted_sequence(text, prompt.tokens.view(), Array2::zeros((0, text.token_dim())).view())?
        };
        features.row_mut(c).assign(&text.encode_tokens(seq.view())?);
        sequences.push(seq);
    }
    Ok(TargetTextFeatures { features, sequences })
}

fn target_text_backward(
    text: &dyn TextEncoder,
    feats: &TargetTextFeatures,
    m: usize,
    d_features: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let mut d_prompt = Array2::zeros((m, text.token_dim()));
    for (c, seq) in feats.sequences.iter().enumerate() {
        let d_seq = text.encode_tokens_backward(seq.view(), d_features.row(c))?;
        d_prompt += &d_seq.slice(s![..m, ..]);
    }
    Ok(d_prompt)
}

/// Cosine logits of the target branch, `[B, C]`.
pub fn target_branch_logits(
    image_features: ArrayView2<f64>,
    prompt: &SoftPromptSequence,
    text: &dyn TextEncoder,
    class_names: &[String],
    include_class_name: bool,
) -> Result<Array2<f64>> {
    let g = target_text_features(prompt, text, class_names, include_class_name)?;
    cosine_matrix(image_features, g.features.view())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPrediction {
    pub l_f: Array2<f64>,
    pub l_g: Array2<f64>,
    pub alpha_fuse: f64,
    pub logit_scale: f64,
    pub probs: Array2<f64>,
}

/// `softmax(logit_scale * (alpha_fuse * l_f + (1 - alpha_fuse) * l_g))`.
pub fn fused_prediction(
    l_f: Array2<f64>,
    l_g: Array2<f64>,
    alpha_fuse: f64,
    logit_scale: f64,
) -> Result<FusedPrediction> {
    if !(0.0..=1.0).contains(&alpha_fuse) {
        return Err(CdbnError::ConfigInvalid(format!(
            "alpha_fuse must lie in [0, 1], got {alpha_fuse}"
        )));
    }
    if l_f.dim() != l_g.dim() {
        return Err(CdbnError::shape(
            "fused_prediction",
            format!("{:?}", l_f.dim()),
            format!("{:?}", l_g.dim()),
        ));
    }
    let z = (&l_f * alpha_fuse + &l_g * (1.0 - alpha_fuse)) * logit_scale;
    let probs = softmax_rows(z.view());
    Ok(FusedPrediction {
        l_f,
        l_g,
        alpha_fuse,
        logit_scale,
        probs,
    })
}

/// Registry names of the target-phase trainable arrays.
pub mod names {
    pub const W1: &str = "W1";
    pub const W2: &str = "W2";
    pub const W3: &str = "W3";
    pub const PROMPT: &str = "T_t";
    pub const BANK: &str = "W_e";
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSettings {
    pub alpha_fuse: f64,
    pub logit_scale: f64,
    pub include_class_name: bool,
}

/// Everything the target phase owns: frozen `G^S` plus the trainable arrays.
#[derive(Clone, Debug)]
pub struct DualBranchModel {
    source: ClassTextFeatures,
    source_hash: String,
    pub fusion: CrossAttentionFusion,
    pub prompt: SoftPromptSequence,
    pub bank: FeatureBank,
    pub settings: BranchSettings,
}

/// Class-side quantities that depend only on parameters; computed once per step.
#[derive(Clone, Debug)]
pub struct ClassHeads {
    pub fusion: FusionForward,
    pub target_text: TargetTextFeatures,
}

/// Gradients with respect to the per-step class heads, accumulated over batches.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub wg_star: Array2<f64>,
    pub target_text: Array2<f64>,
}

impl HeadGrads {
    pub fn zeros(c: usize, d: usize) -> Self {
        HeadGrads {
            wg_star: Array2::zeros((c, d)),
            target_text: Array2::zeros((c, d)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub w3: Array2<f64>,
    pub prompt: Array2<f64>,
    /// `None` when the bank is frozen.
    pub bank: Option<Array3<f64>>,
}

impl DualBranchModel {
    pub fn new(
        source: ClassTextFeatures,
        fusion: CrossAttentionFusion,
        prompt: SoftPromptSequence,
        bank: FeatureBank,
        settings: BranchSettings,
    ) -> Result<Self> {
        if !source.frozen {
            return Err(CdbnError::ConfigInvalid(
                "source class features must be frozen before adaptation".into(),
            ));
        }
        if bank.num_classes() != source.num_classes() || bank.dim() != source.dim() {
            return Err(CdbnError::shape(
                "DualBranchModel::new",
                format!("bank [{}, K, {}]", source.num_classes(), source.dim()),
                format!("{:?}", bank.values.dim()),
            ));
        }
        if !(0.0..=1.0).contains(&settings.alpha_fuse) {
            return Err(CdbnError::ConfigInvalid(format!(
                "alpha_fuse must lie in [0, 1], got {}",
                settings.alpha_fuse
            )));
        }
        let source_hash = source.content_hash();
        Ok(DualBranchModel {
            source,
            source_hash,
            fusion,
            prompt,
            bank,
            settings,
        })
    }

    pub fn source(&self) -> &ClassTextFeatures {
        &self.source
    }

    /// Hash of `G^S` taken at construction.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// Fails if `G^S` no longer matches the hash recorded at construction.
    pub fn verify_source(&self) -> Result<()> {
        self.source.verify_hash(&self.source_hash)
    }

    pub fn num_classes(&self) -> usize {
        self.source.num_classes()
    }

    /// Names of the arrays the optimizer may update.
    pub fn trainable_names(&self) -> Vec<&'static str> {
        let mut v = vec![names::W1, names::W2, names::W3, names::PROMPT];
        if self.bank.trainable {
            v.push(names::BANK);
        }
        v
    }

    /// Mutable views of every trainable array, keyed by registry name.
    pub fn trainable_params_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v: Vec<(&'static str, &mut [f64])> = vec![
            (names::W1, self.fusion.w1.as_slice_mut().expect("contiguous")),
            (names::W2, self.fusion.w2.as_slice_mut().expect("contiguous")),
            (names::W3, self.fusion.w3.as_slice_mut().expect("contiguous")),
            (names::PROMPT, self.prompt.tokens.as_slice_mut().expect("contiguous")),
        ];
        if self.bank.trainable {
            v.push((names::BANK, self.bank.values.as_slice_mut().expect("contiguous")));
        }
        v
    }

    pub fn class_heads(&self, text: &dyn TextEncoder) -> Result<ClassHeads> {
        let fusion = fuse_class_features(
            self.source.features.view(),
            self.bank.values.view(),
            &self.fusion,
        )?;
        let target_text = target_text_features(
            &self.prompt,
            text,
            &self.source.class_names,
            self.settings.include_class_name,
        )?;
        Ok(ClassHeads {
            fusion,
            target_text,
        })
    }

    pub fn predict(&self, heads: &ClassHeads, image_features: ArrayView2<f64>) -> Result<FusedPrediction> {
        let l_f = transfer_branch_logits(image_features, heads.fusion.wg_star.view())?;
        let l_g = cosine_matrix(image_features, heads.target_text.features.view())?;
        fused_prediction(l_f, l_g, self.settings.alpha_fuse, self.settings.logit_scale)
    }

    /// Convenience: class heads plus prediction in one call.
    pub fn forward(&self, text: &dyn TextEncoder, image_features: ArrayView2<f64>) -> Result<FusedPrediction> {
        let heads = self.class_heads(text)?;
        self.predict(&heads, image_features)
    }

    /// Accumulates `dL/d(class heads)` from `dL/dprobs` of one batch.
    pub fn backward_batch(
        &self,
        heads: &ClassHeads,
        image_features: ArrayView2<f64>,
        pred: &FusedPrediction,
        d_probs: ArrayView2<f64>,
        acc: &mut HeadGrads,
    ) {
        let dz = crate::math::softmax_rows_backward(pred.probs.view(), d_probs) * pred.logit_scale;
        let d_lf = &dz * pred.alpha_fuse;
        let d_lg = &dz * (1.0 - pred.alpha_fuse);
        acc.wg_star += &cosine_matrix_backward_weights(
            image_features,
            heads.fusion.wg_star.view(),
            pred.l_f.view(),
            d_lf.view(),
        );
        acc.target_text += &cosine_matrix_backward_weights(
            image_features,
            heads.target_text.features.view(),
            pred.l_g.view(),
            d_lg.view(),
        );
    }

    /// Pushes accumulated head gradients back to the trainable arrays.
    pub fn backward_heads(&self, heads: &ClassHeads, text: &dyn TextEncoder, grads: &HeadGrads) -> Result<ParamGrads> {
        let fg = fuse_class_features_backward(
            self.source.features.view(),
            self.bank.values.dim(),
            &self.fusion,
            &heads.fusion,
            grads.wg_star.view(),
        );
        let prompt = target_text_backward(
            text,
            &heads.target_text,
            self.prompt.len(),
            grads.target_text.view(),
        )?;
        Ok(ParamGrads {
            w1: fg.w1,
            w2: fg.w2,
            w3: fg.w3,
            prompt,
            bank: self.bank.trainable.then_some(fg.bank),
        })
    }

    /// Flat views of the gradients, aligned with [`Self::trainable_params_mut`].
    pub fn grad_slices(grads: &ParamGrads) -> Vec<(&'static str, &[f64])> {
        let mut v = vec![
            (names::W1, grads.w1.as_slice().expect("contiguous")),
            (names::W2, grads.w2.as_slice().expect("contiguous")),
            (names::W3, grads.w3.as_slice().expect("contiguous")),
            (names::PROMPT, grads.prompt.as_slice().expect("contiguous")),
        ];
        if let Some(b) = &grads.bank {
            v.push((names::BANK, b.as_slice().expect("contiguous")));
        }
        v
    }

    /// Digest over all trainable arrays.
    pub fn trainable_checksum(&self) -> String {
        let mut parts: Vec<&[f64]> = vec![
            self.fusion.w1.as_slice().expect("contiguous"),
            self.fusion.w2.as_slice().expect("contiguous"),
            self.fusion.w3.as_slice().expect("contiguous"),
            self.prompt.tokens.as_slice().expect("contiguous"),
        ];
        parts.push(self.bank.values.as_slice().expect("contiguous"));
        crate::math::content_hash(parts)
    }

    /// Row-wise argmax of each branch and of the fused prediction.
    pub fn branch_argmax(pred: &FusedPrediction) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let am = |m: &Array2<f64>| -> Vec<usize> {
            m.axis_iter(Axis(0)).map(crate::math::argmax).collect()
        };
        (am(&pred.l_f), am(&pred.l_g), am(&pred.probs))
    }
}

/// Fused logits before softmax, for callers that only need rankings.
pub fn fused_logits(l_f: ArrayView2<f64>, l_g: ArrayView2<f64>, alpha_fuse: f64) -> Array2<f64> {
    &l_f * alpha_fuse + &l_g * (1.0 - alpha_fuse)
}

/// Gate values as a `[C]` vector when the gate is scalar.
pub fn scalar_gates(fwd: &FusionForward) -> Option<Array1<f64>> {
    (fwd.gates.ncols() == 1).then(|| fwd.gates.column(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy_fusion(d: usize) -> CrossAttentionFusion {
        CrossAttentionFusion::init(d, AttentionScope::PerClass, GateKind::Scalar, 3)
    }

    #[test]
    fn zero_gate_returns_source_features() {
        let g = array![[1.0, 0.0, 0.5], [0.2, -1.0, 0.0]];
        let bank = Array3::from_shape_fn((2, 3, 3), |(c, k, d)| (c + k + d) as f64 * 0.1);
        let out = fuse_class_features(g.view(), bank.view(), &toy_fusion(3)).unwrap();
        assert_eq!(out.wg_star, g);
    }

    #[test]
    fn single_key_attention_adds_gated_entry() {
        let g = array![[1.0, 0.5], [0.0, 1.0]];
        let bank = Array3::from_shape_vec((2, 1, 2), vec![0.3, -0.2, 0.7, 0.1]).unwrap();
        let mut f = toy_fusion(2);
        f.w3 = array![[0.4], [-0.3]];
        let out = fuse_class_features(g.view(), bank.view(), &f).unwrap();
        for c in 0..2 {
            let gate = g.row(c).dot(&f.w3.column(0));
            for j in 0..2 {
                assert_abs_diff_eq!(
                    out.wg_star[[c, j]],
                    g[[c, j]] + gate * bank[[c, 0, j]],
                    epsilon = 1e-14
                );
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let g = array![[1.0, 0.5, 0.1], [0.0, 1.0, -0.4]];
        let bank = Array3::from_shape_fn((2, 4, 3), |(c, k, d)| ((c * 7 + k * 3 + d) as f64).sin());
        for scope in [AttentionScope::PerClass, AttentionScope::Global] {
            let f = CrossAttentionFusion::init(3, scope, GateKind::Scalar, 1);
            let out = fuse_class_features(g.view(), bank.view(), &f).unwrap();
            for row in out.attention.axis_iter(Axis(0)) {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            }
            if scope == AttentionScope::PerClass {
                assert_eq!(out.attention[[0, 5]], 0.0);
            }
        }
    }

    #[test]
    fn fusion_rejects_mismatched_shapes() {
        let g = array![[1.0, 0.0]];
        let bank = Array3::zeros((2, 1, 2));
        assert!(matches!(
            fuse_class_features(g.view(), bank.view(), &toy_fusion(2)),
            Err(CdbnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fused_prediction_edges() {
        let lf = array![[0.9, 0.1, -0.2]];
        let lg = array![[-0.5, 0.8, 0.0]];
        let p1 = fused_prediction(lf.clone(), lg.clone(), 1.0, 1.0).unwrap();
        assert_eq!(crate::math::argmax(p1.probs.row(0)), 0);
        let p0 = fused_prediction(lf.clone(), lg.clone(), 0.0, 1.0).unwrap();
        assert_eq!(crate::math::argmax(p0.probs.row(0)), 1);
        let a = fused_prediction(lf.clone(), lf.clone(), 0.2, 1.0).unwrap();
        let b = fused_prediction(lf.clone(), lf.clone(), 0.9, 1.0).unwrap();
        for (x, y) in a.probs.iter().zip(b.probs.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-15);
        }
        assert!(fused_prediction(lf.clone(), lg, 1.5, 1.0).is_err());
        assert!(fused_prediction(lf, array![[0.0, 0.0]], 0.5, 1.0).is_err());
    }
}
