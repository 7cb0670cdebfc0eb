//! Unsupervised target-phase objectives and the embedding-level augmentations
//! that feed the consistency term.
//!
//! Every loss here is a function of fused probabilities and comes with an
//! explicit `dL/dprobs`, which the dual-branch backward consumes.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CdbnError, Result};
use crate::math::{LOG_EPS, argmax};
use crate::source::{cross_entropy_grad, source_cross_entropy};

fn check_same_shape(op: &'static str, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CdbnError::shape(op, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// Cross-entropy of fused predictions against fixed one-hot pseudo-labels.
pub fn pseudo_label_ce(probs: ArrayView2<f64>, pseudo_labels: ArrayView2<f64>) -> Result<f64> {
    check_same_shape("pseudo_label_ce", probs, pseudo_labels)?;
    source_cross_entropy(probs, pseudo_labels)
}

pub fn pseudo_label_ce_grad(probs: ArrayView2<f64>, pseudo_labels: ArrayView2<f64>) -> Array2<f64> {
    cross_entropy_grad(probs, pseudo_labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyTerm {
    pub loss: f64,
    /// Weak-view argmax per sample.
    pub targets: Vec<usize>,
    /// Whether the weak-view max confidence reached the threshold.
    pub mask: Vec<bool>,
}

impl ConsistencyTerm {
    pub fn masked_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// `dL/d(strong probs)`; the weak view is a constant.
    pub fn grad_strong(&self, strong_probs: ArrayView2<f64>) -> Array2<f64> {
        let b = strong_probs.nrows() as f64;
        let mut d = Array2::zeros(strong_probs.raw_dim());
        for (i, (&t, &m)) in self.targets.iter().zip(&self.mask).enumerate() {
            if m {
                d[[i, t]] = -1.0 / (b * (strong_probs[[i, t]] + LOG_EPS));
            }
        }
        d
    }
}

/// Mean over the batch of `1[max(weak_i) >= theta] * -log strong_i[argmax(weak_i)]`.
pub fn consistency_loss(
    weak_probs: ArrayView2<f64>,
    strong_probs: ArrayView2<f64>,
    theta: f64,
) -> Result<ConsistencyTerm> {
    check_same_shape("consistency_loss", weak_probs, strong_probs)?;
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(CdbnError::ConfigInvalid(format!("theta_T must lie in (0, 1], got {theta}")));
    }
    let b = weak_probs.nrows() as f64;
    let mut targets = Vec::with_capacity(weak_probs.nrows());
    let mut mask = Vec::with_capacity(weak_probs.nrows());
    let mut sum = 0.0;
    for (w, s) in weak_probs.axis_iter(Axis(0)).zip(strong_probs.axis_iter(Axis(0))) {
        let t = argmax(w);
        let m = w[t] >= theta;
        if m {
            sum -= (s[t] + LOG_EPS).ln();
        }
        targets.push(t);
        mask.push(m);
    }
    Ok(ConsistencyTerm {
        loss: (sum / b).max(0.0),
        targets,
        mask,
    })
}

fn entropy_terms(p: f64) -> f64 {
    p * (p + LOG_EPS).ln()
}

/// Mean instance entropy minus the entropy of the batch-mean prediction.
pub fn information_maximization_loss(probs: ArrayView2<f64>) -> Result<f64> {
    if probs.nrows() == 0 || probs.ncols() == 0 {
        return Err(CdbnError::shape("information_maximization_loss", "non-empty [B, C]", format!("{:?}", probs.dim())));
    }
    let b = probs.nrows() as f64;
    let instance = -probs.iter().map(|&p| entropy_terms(p)).sum::<f64>() / b;
    let marginal: Array1<f64> = probs.mean_axis(Axis(0)).expect("non-empty");
    let global = -marginal.iter().map(|&p| entropy_terms(p)).sum::<f64>();
    Ok(instance - global)
}

pub fn information_maximization_grad(probs: ArrayView2<f64>) -> Array2<f64> {
    let b = probs.nrows() as f64;
    let marginal: Array1<f64> = probs.mean_axis(Axis(0)).expect("non-empty");
    let d_marg: Array1<f64> = marginal.mapv(|p| ((p + LOG_EPS).ln() + p / (p + LOG_EPS)) / b);
    let mut d = Array2::zeros(probs.raw_dim());
    Zip::indexed(&mut d).and(probs).for_each(|(_, j), d, &p| {
        *d = -((p + LOG_EPS).ln() + p / (p + LOG_EPS)) / b + d_marg[j];
    });
    d
}

/// Which unsupervised terms are active; used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSwitches {
    pub ce: bool,
    pub im: bool,
    pub consistency: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            ce: true,
            im: true,
            consistency: true,
        }
    }
}

impl LossSwitches {
    /// The six combinations of the loss ablation table, in table order.
    pub fn ablation_grid() -> [LossSwitches; 6] {
        let s = |ce, im, consistency| LossSwitches { ce, im, consistency };
        [
            s(true, false, false),
            s(false, true, false),
            s(true, false, true),
            s(true, true, false),
            s(false, true, true),
            s(true, true, true),
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.ce {
            parts.push("ce");
        }
        if self.im {
            parts.push("im");
        }
        if self.consistency {
            parts.push("consistency");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        let mut s = LossSwitches {
            ce: false,
            im: false,
            consistency: false,
        };
        if label == "none" {
            return Ok(s);
        }
        for part in label.split('+') {
            match part.trim() {
                "ce" => s.ce = true,
                "im" => s.im = true,
                "consistency" | "fm" => s.consistency = true,
                other => {
                    return Err(CdbnError::ConfigInvalid(format!("unknown loss term `{other}`")));
                }
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_pseudo: f64,
    pub consistency: f64,
    pub im: f64,
    pub total: f64,
}

/// Sums the three components with unit weights, rejecting non-finite values.
pub fn total_loss(ce_pseudo: f64, consistency: f64, im: f64) -> Result<LossBreakdown> {
    for (component, value) in [("ce_pseudo", ce_pseudo), ("consistency", consistency), ("im", im)] {
        if !value.is_finite() {
            return Err(CdbnError::NonFiniteLoss { component, value });
        }
    }
    let total = ce_pseudo + consistency + im;
    Ok(LossBreakdown {
        ce_pseudo,
        consistency,
        im,
        total,
    })
}

/// Weak and strong views of the same batch, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedViewPair {
    pub weak: Array2<f64>,
    pub strong: Array2<f64>,
}

/// Embedding-space augmentation: Gaussian noise for both views, plus random
/// coordinate dropout for the strong view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingAugment {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_dropout: f64,
}

impl Default for EmbeddingAugment {
    fn default() -> Self {
        EmbeddingAugment {
            weak_sigma: 0.01,
            strong_sigma: 0.1,
            strong_dropout: 0.1,
        }
    }
}

impl EmbeddingAugment {
    pub fn validate(&self) -> Result<()> {
        if self.weak_sigma < 0.0 || self.strong_sigma < 0.0 || !(0.0..1.0).contains(&self.strong_dropout) {
            return Err(CdbnError::ConfigInvalid(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }

    pub fn weak<R: Rng + ?Sized>(&self, x: ArrayView2<f64>, rng: &mut R) -> Array2<f64> {
        add_noise(x, self.weak_sigma, rng)
    }

    pub fn strong<R: Rng + ?Sized>(&self, x: ArrayView2<f64>, rng: &mut R) -> Array2<f64> {
        let mut out = add_noise(x, self.strong_sigma, rng);
        for mut row in out.axis_iter_mut(Axis(0)) {
            let keep_one = rng.random_range(0..row.len());
            for (j, v) in row.iter_mut().enumerate() {
                if j != keep_one && rng.random::<f64>() < self.strong_dropout {
                    *v = 0.0;
                }
            }
        }
        out
    }

    pub fn views<R: Rng + ?Sized>(&self, x: ArrayView2<f64>, rng: &mut R) -> AugmentedViewPair {
        AugmentedViewPair {
            weak: self.weak(x, rng),
            strong: self.strong(x, rng),
        }
    }
}

fn add_noise<R: Rng + ?Sized>(x: ArrayView2<f64>, sigma: f64, rng: &mut R) -> Array2<f64> {
    if sigma == 0.0 {
        return x.to_owned();
    }
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    x.mapv(|v| v + n.sample(rng))
}
