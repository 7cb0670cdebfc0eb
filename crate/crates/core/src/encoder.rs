//! Frozen dual encoders.
//!
//! Two backends sit behind the [`ImageEncoder`] / [`TextEncoder`] traits:
//! a deterministic mock pair used for desk-scale runs and tests, and a
//! pretrained backend that downstream crates plug in through a
//! [`BackendRegistry`]. Neither trait exposes a way to mutate weights, so
//! the optimizer can never reach them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CdbnError, Result};
use crate::math::{content_hash, l2_norm, normalize, normalize_backward};

/// Opaque sample identifier. For file-backed datasets this is the path
/// relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub String);

impl SampleId {
    pub fn new(id: impl Into<String>) -> Self {
        SampleId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleId {
    fn from(s: &str) -> Self {
        SampleId(s.to_owned())
    }
}

pub trait ImageEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn backend_id(&self) -> &str;

    /// Encodes a batch into a `[B, D]` matrix. Output rows are not normalized.
    fn encode_images(&self, batch: &[SampleId]) -> Result<Array2<f64>>;

    /// Digest over every weight the encoder holds, used to prove it stayed frozen.
    fn parameter_digest(&self) -> String;
}

pub trait TextEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn token_dim(&self) -> usize;
    fn max_sequence_length(&self) -> usize;

    /// Fixed embedding of the hand-written prefix "a photo of a".
    fn prefix_tokens(&self) -> Array2<f64>;

    /// Fixed token embedding(s) of a class name.
    fn class_name_tokens(&self, class_name: &str) -> Result<Array2<f64>>;

    /// Encodes a sequence of token embeddings `[L, D_token]` into one `D`-vector.
    fn encode_tokens(&self, tokens: ArrayView2<f64>) -> Result<Array1<f64>>;

    /// Vector-Jacobian product of [`TextEncoder::encode_tokens`] with respect to
    /// the input tokens. Weights receive nothing.
    fn encode_tokens_backward(
        &self,
        tokens: ArrayView2<f64>,
        d_embedding: ArrayView1<f64>,
    ) -> Result<Array2<f64>>;

    fn parameter_digest(&self) -> String;
}

/// Concatenates `prefix ++ class_tokens` and encodes the result.
pub fn encode_prompted_text(
    encoder: &dyn TextEncoder,
    prefix_tokens: ArrayView2<f64>,
    class_tokens: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let seq = prompted_sequence(encoder, prefix_tokens, class_tokens)?;
    encoder.encode_tokens(seq.view())
}

pub(crate) fn prompted_sequence(
    encoder: &dyn TextEncoder,
    prefix_tokens: ArrayView2<f64>,
    class_tokens: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let len = prefix_tokens.nrows() + class_tokens.nrows();
    if len > encoder.max_sequence_length() {
        return Err(CdbnError::SequenceTooLong {
            len,
            max: encoder.max_sequence_length(),
        });
    }
    concatenate(Axis(0), &[prefix_tokens, class_tokens])
        .map_err(|e| CdbnError::shape("encode_prompted_text", "matching token dims", e))
}

/// Number of fixed tokens in the "a photo of a" prefix.
pub const PREFIX_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockEncoderConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub max_sequence_length: usize,
}

impl Default for MockEncoderConfig {
    fn default() -> Self {
        MockEncoderConfig {
            seed: 0,
            embed_dim: 16,
            token_dim: 16,
            max_sequence_length: 77,
        }
    }
}

/// Image side of the mock pair: a lookup table from sample id to its stored embedding.
#[derive(Clone, Debug, Default)]
pub struct MockImageEncoder {
    dim: usize,
    store: BTreeMap<SampleId, Array1<f64>>,
}

impl MockImageEncoder {
    pub fn new(dim: usize) -> Self {
        MockImageEncoder {
            dim,
            store: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: SampleId, embedding: Array1<f64>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(CdbnError::shape(
                "MockImageEncoder::insert",
                self.dim,
                embedding.len(),
            ));
        }
        self.store.insert(id, embedding);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }
}

impl ImageEncoder for MockImageEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn backend_id(&self) -> &str {
        "mock"
    }

    fn encode_images(&self, batch: &[SampleId]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((batch.len(), self.dim));
        for (mut row, id) in out.axis_iter_mut(Axis(0)).zip(batch) {
            let e = self
                .store
                .get(id)
                .ok_or_else(|| CdbnError::UnknownSample(id.to_string()))?;
            row.assign(e);
        }
        Ok(out)
    }

    fn parameter_digest(&self) -> String {
        let mut ids = Vec::with_capacity(self.store.len());
        for id in self.store.keys() {
            ids.extend(id.0.bytes().map(f64::from));
            ids.push(-1.0);
        }
        let parts = std::iter::once(ids.as_slice())
            .chain(self.store.values().map(|v| v.as_slice().expect("contiguous")));
        content_hash(parts)
    }
}

/// Text side of the mock pair: `normalize(P · mean(tokens))` with a seeded
/// linear map `P` that has orthonormal columns (or rows, when `D_token > D`).
#[derive(Clone, Debug)]
pub struct MockTextEncoder {
    projection: Array2<f64>,
    prefix: Array2<f64>,
    class_names: Vec<String>,
    class_tokens: Array2<f64>,
    max_len: usize,
}

impl MockTextEncoder {
    pub fn projection(&self) -> ArrayView2<'_, f64> {
        self.projection.view()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Mean token embedding of a sequence.
    pub fn mean_token(tokens: ArrayView2<f64>) -> Array1<f64> {
        tokens
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(tokens.ncols()))
    }
}

impl TextEncoder for MockTextEncoder {
    fn embed_dim(&self) -> usize {
        self.projection.nrows()
    }

    fn token_dim(&self) -> usize {
        self.projection.ncols()
    }

    fn max_sequence_length(&self) -> usize {
        self.max_len
    }

    fn prefix_tokens(&self) -> Array2<f64> {
        self.prefix.clone()
    }

    fn class_name_tokens(&self, class_name: &str) -> Result<Array2<f64>> {
        let idx = self
            .class_names
            .iter()
            .position(|n| n == class_name)
            .ok_or_else(|| CdbnError::UnknownClass(class_name.to_owned()))?;
        Ok(self.class_tokens.row(idx).insert_axis(Axis(0)).to_owned())
    }

    fn encode_tokens(&self, tokens: ArrayView2<f64>) -> Result<Array1<f64>> {
        if tokens.ncols() != self.token_dim() {
            return Err(CdbnError::shape(
                "encode_tokens",
                self.token_dim(),
                tokens.ncols(),
            ));
        }
        if tokens.nrows() > self.max_len {
            return Err(CdbnError::SequenceTooLong {
                len: tokens.nrows(),
                max: self.max_len,
            });
        }
        let projected = self.projection.dot(&Self::mean_token(tokens));
        normalize(projected.view()).ok_or(CdbnError::DegenerateEmbedding)
    }

    fn encode_tokens_backward(
        &self,
        tokens: ArrayView2<f64>,
        d_embedding: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        let projected = self.projection.dot(&Self::mean_token(tokens));
        if l2_norm(projected.view()) == 0.0 {
            return Err(CdbnError::DegenerateEmbedding);
        }
        let d_projected = normalize_backward(projected.view(), d_embedding);
        let d_mean = self.projection.t().dot(&d_projected) / tokens.nrows() as f64;
        let mut out = Array2::zeros(tokens.raw_dim());
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.assign(&d_mean);
        }
        Ok(out)
    }

    fn parameter_digest(&self) -> String {
        content_hash([
            self.projection.as_slice().expect("contiguous"),
            self.prefix.as_slice().expect("contiguous"),
            self.class_tokens.as_slice().expect("contiguous"),
        ])
    }
}

/// Deterministic stand-in for a pretrained vision-language encoder pair.
#[derive(Clone, Debug)]
pub struct MockEncoderPair {
    pub config: MockEncoderConfig,
    pub image: MockImageEncoder,
    pub text: MockTextEncoder,
}

impl MockEncoderPair {
    /// Builds the pair. When `class_anchors` (`[C, D]`) is given, each class-name
    /// token is chosen so that its encoding points along the class anchor, the
    /// way a pretrained text tower aligns names with image clusters. Otherwise
    /// name tokens are seeded random.
    pub fn new(
        config: MockEncoderConfig,
        class_names: Vec<String>,
        class_anchors: Option<ArrayView2<f64>>,
    ) -> Result<Self> {
        let MockEncoderConfig {
            seed,
            embed_dim: d,
            token_dim: dt,
            max_sequence_length,
        } = config;
        if d == 0 || dt == 0 {
            return Err(CdbnError::ConfigInvalid(
                "mock encoder dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_636b);
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let raw = Array2::from_shape_fn((d, dt), |_| std_normal.sample(&mut rng));
        let projection = if dt <= d {
            orthonormalize_columns(raw)
        } else {
            orthonormalize_columns(raw.t().to_owned()).t().to_owned()
        };

        let prefix_std = Normal::new(0.0, 0.02).expect("valid normal");
        let prefix = Array2::from_shape_fn((PREFIX_LEN, dt), |_| prefix_std.sample(&mut rng));

        let c = class_names.len();
        let class_tokens = match class_anchors {
            Some(anchors) => {
                if anchors.dim() != (c, d) {
                    return Err(CdbnError::shape(
                        "MockEncoderPair::new",
                        format!("anchors [{c}, {d}]"),
                        format!("{:?}", anchors.dim()),
                    ));
                }
                anchors.dot(&projection)
            }
            None => {
                let s = Normal::new(0.0, 1.0 / (dt as f64).sqrt()).expect("valid normal");
                Array2::from_shape_fn((c, dt), |_| s.sample(&mut rng))
            }
        };

        Ok(MockEncoderPair {
            config,
            image: MockImageEncoder::new(d),
            text: MockTextEncoder {
                projection,
                prefix,
                class_names,
                class_tokens,
                max_len: max_sequence_length,
            },
        })
    }

    pub fn parameter_digest(&self) -> String {
        format!(
            "{}:{}",
            self.image.parameter_digest(),
            self.text.parameter_digest()
        )
    }
}

fn orthonormalize_columns(mut m: Array2<f64>) -> Array2<f64> {
    let cols = m.ncols();
    for j in 0..cols {
        for i in 0..j {
            let prev = m.column(i).to_owned();
            let proj = prev.dot(&m.column(j));
            m.column_mut(j).scaled_add(-proj, &prev);
        }
        let n = l2_norm(m.column(j));
        m.column_mut(j).mapv_inplace(|x| x / n);
    }
    m
}

/// Frozen image/text encoders as shared trait objects.
#[derive(Clone)]
pub struct EncoderPair {
    pub image: Arc<dyn ImageEncoder>,
    pub text: Arc<dyn TextEncoder>,
}

impl EncoderPair {
    pub fn from_mock(pair: MockEncoderPair) -> Self {
        EncoderPair {
            image: Arc::new(pair.image),
            text: Arc::new(pair.text),
        }
    }

    pub fn parameter_digest(&self) -> String {
        format!(
            "{}:{}",
            self.image.parameter_digest(),
            self.text.parameter_digest()
        )
    }
}

impl fmt::Debug for EncoderPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncoderPair")
            .field("image", &self.image.backend_id())
            .field("embed_dim", &self.image.embed_dim())
            .field("token_dim", &self.text.token_dim())
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainedSpec {
    pub model_name: String,
    pub weights_path: PathBuf,
    pub class_names: Vec<String>,
}

type BackendFactory = Box<dyn Fn(&PretrainedSpec) -> Result<EncoderPair> + Send + Sync>;

/// Runtime registry of pretrained backends, keyed by model name.
#[derive(Default)]
pub struct BackendRegistry {
    factories: HashMap<String, BackendFactory>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, model_name: impl Into<String>, factory: F)
    where
        F: Fn(&PretrainedSpec) -> Result<EncoderPair> + Send + Sync + 'static,
    {
        self.factories.insert(model_name.into(), Box::new(factory));
    }

    pub fn resolve(&self, spec: &PretrainedSpec) -> Result<EncoderPair> {
        let factory = self
            .factories
            .get(&spec.model_name)
            .ok_or_else(|| CdbnError::BackendUnavailable(spec.model_name.clone()))?;
        factory(spec)
    }
}
