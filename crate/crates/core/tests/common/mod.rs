#![allow(dead_code)]

use cdbn::bank::{BankSlot, FeatureBank, assign_pseudo_labels, select_top_k};
use cdbn::branch::{
    AttentionScope, BranchSettings, CrossAttentionFusion, DualBranchModel, GateKind, ParamGrads, SoftPromptSequence,
    fuse_class_features,
};
use cdbn::encoder::{EncoderPair, MockEncoderConfig, MockEncoderPair, SampleId};
use cdbn::source::{ClassTextFeatures, PhaseTag, SimilarityKernel};
use ndarray::{Array2, Array3, array};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(shape: (usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn(shape, |_| n.sample(rng))
}

pub fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = gaussian((n, d), 1.0, rng);
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    m
}

pub fn class_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class_{i}")).collect()
}

pub fn encoders(c: usize, d: usize, token_dim: usize) -> EncoderPair {
    let pair = MockEncoderPair::new(
        MockEncoderConfig {
            seed: 11,
            embed_dim: d,
            token_dim,
            max_sequence_length: 77,
        },
        class_names(c),
        None,
    )
    .unwrap();
    EncoderPair::from_mock(pair)
}

/// Small model with every trainable array at a generic (non-initial) value so
/// that no gradient path is trivially zero.
pub struct Tiny {
    pub encoders: EncoderPair,
    pub model: DualBranchModel,
}

pub fn tiny(c: usize, k: usize, d: usize, m: usize, gate: GateKind, scope: AttentionScope, logit_scale: f64, seed: u64) -> Tiny {
    let mut r = rng(seed);
    let encoders = encoders(c, d, d);
    let source = ClassTextFeatures {
        features: unit_rows(c, d, &mut r),
        class_names: class_names(c),
        phase: PhaseTag::Source,
        frozen: true,
    };
    let bank_flat = gaussian((c * k, d), 0.5, &mut r);
    let bank = FeatureBank {
        values: Array3::from_shape_vec((c, k, d), bank_flat.into_raw_vec_and_offset().0).unwrap(),
        slots: (0..c)
            .map(|cl| {
                (0..k)
                    .map(|j| BankSlot {
                        sample_id: SampleId::new(format!("t/{cl}/{j}")),
                        confidence: 0.9,
                        padded: false,
                    })
                    .collect()
            })
            .collect(),
        trainable: true,
    };
    let mut fusion = CrossAttentionFusion::init(d, scope, gate, seed);
    fusion.w1 = gaussian(fusion.w1.dim(), 0.8, &mut r);
    fusion.w2 = gaussian(fusion.w2.dim(), 0.8, &mut r);
    fusion.w3 = gaussian(fusion.w3.dim(), 0.4, &mut r);
    let prompt = SoftPromptSequence {
        tokens: gaussian((m, d), 0.3, &mut r),
    };
    let model = DualBranchModel::new(
        source,
        fusion,
        prompt,
        bank,
        BranchSettings {
            alpha_fuse: 0.4,
            logit_scale,
            include_class_name: true,
        },
    )
    .unwrap();
    Tiny { encoders, model }
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-14 { diff } else { diff / scale }
}

/// Central differences of `f` over every trainable array of `model`.
pub fn numeric_grads<F>(model: &DualBranchModel, f: F) -> Vec<(&'static str, Vec<f64>)>
where
    F: Fn(&DualBranchModel) -> f64,
{
    const H: f64 = 1e-6;
    let names = model.trainable_names();
    let mut out = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let len = {
            let mut m = model.clone();
            let params = m.trainable_params_mut();
            params[pi].1.len()
        };
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.trainable_params_mut()[pi].1[i] += H;
            let mut minus = model.clone();
            minus.trainable_params_mut()[pi].1[i] -= H;
            *gi = (f(&plus) - f(&minus)) / (2.0 * H);
        }
        out.push((*name, g));
    }
    out
}

/// Worst per-array relative error between analytic and numeric gradients.
pub fn compare(grads: &ParamGrads, numeric: &[(&'static str, Vec<f64>)]) -> Vec<(&'static str, f64)> {
    let analytic = DualBranchModel::grad_slices(grads);
    numeric
        .iter()
        .map(|(name, n)| {
            let a = analytic.iter().find(|(an, _)| an == name).expect("analytic grad").1;
            (*name, rel_err(a, n))
        })
        .collect()
}

pub fn worst(errs: &[(&'static str, f64)]) -> f64 {
    errs.iter().map(|e| e.1).fold(0.0, f64::max)
}

pub fn loop_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Class probabilities of one image, one class at a time.
pub fn loop_probs(x: &[f64], classes: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let exps: Vec<f64> = classes.iter().map(|g| (loop_cos(x, g) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

pub fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Pseudo-labels and per-class top-K on 200 samples against an exhaustive
/// oracle: every sample scored by loops, each class sorted by repeated
/// extraction of the maximum (earliest index on ties).
/// Number of disagreements with the oracle; 0 means identical.
pub fn top_k_oracle_mismatches(seed: u64) -> usize {
    let mut mismatches = 0;
    let (n, c, d) = (200, 5, 8);
    let mut r = rng(seed);
    let x = gaussian((n, d), 1.0, &mut r);
    let g = gaussian((c, d), 1.0, &mut r);
    let ids: Vec<SampleId> = (0..n).map(|i| SampleId::new(format!("t{i:03}"))).collect();
    let source = ClassTextFeatures {
        features: g.clone(),
        class_names: class_names(c),
        phase: PhaseTag::Source,
        frozen: true,
    };
    let records = assign_pseudo_labels(&ids, x.view(), &source, 1.0, SimilarityKernel::Cosine).unwrap();

    let mut oracle: Vec<Vec<(usize, f64)>> = vec![Vec::new(); c];
    for (i, xi) in rows(&x).iter().enumerate() {
        let p = loop_probs(xi, &rows(&g), 1.0);
        let mut best = 0;
        for k in 1..c {
            if p[k] > p[best] {
                best = k;
            }
        }
        if records[i].pseudo_class != best || (records[i].confidence - p[best]).abs() > 1e-12 {
            mismatches += 1;
        }
        oracle[best].push((i, p[best]));
    }

    for k in [1, 3, 8, 50] {
        let set = select_top_k(&records, c, k).unwrap();
        for class in 0..c {
            let mut pool = oracle[class].clone();
            let mut expected = Vec::new();
            while expected.len() < k && !pool.is_empty() {
                let mut m = 0;
                for j in 1..pool.len() {
                    if pool[j].1 > pool[m].1 {
                        m = j;
                    }
                }
                expected.push(pool.remove(m).0);
            }
            let got: Vec<usize> = set.per_class[class]
                .iter()
                .map(|rec| ids.iter().position(|id| *id == rec.sample_id).unwrap())
                .collect();
            if got != expected {
                mismatches += 1;
            }
        }
    }
    mismatches
}

/// Fusion for C=2, K=2, D=2 written as scalar loops.
/// Largest absolute difference between library fusion and the loop version.
pub fn fusion_oracle_max_diff() -> f64 {
    let mut worst: f64 = 0.0;
    let g = array![[0.6, 0.8], [-0.28, 0.96]];
    let bank = Array3::from_shape_vec((2, 2, 2), vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.4, 0.9, 0.9]).unwrap();
    let mut fusion = CrossAttentionFusion::init(2, AttentionScope::PerClass, GateKind::Scalar, 0);
    fusion.w1 = array![[0.5, -1.2], [0.7, 0.3]];
    fusion.w2 = array![[-0.4, 0.8], [1.5, 0.1]];
    fusion.w3 = array![[0.9], [-0.6]];
    let fwd = fuse_class_features(g.view(), bank.view(), &fusion).unwrap();

    let da = 2.0_f64;
    for c in 0..2 {
        let mut q = [0.0; 2];
        for a in 0..2 {
            for i in 0..2 {
                q[a] += g[[c, i]] * fusion.w1[[i, a]];
            }
        }
        let mut scores = [0.0; 2];
        for j in 0..2 {
            for a in 0..2 {
                let mut key = 0.0;
                for i in 0..2 {
                    key += bank[[c, j, i]] * fusion.w2[[i, a]];
                }
                scores[j] += q[a] * key;
            }
            scores[j] /= da.sqrt();
        }
        let mx = scores[0].max(scores[1]);
        let e = [(scores[0] - mx).exp(), (scores[1] - mx).exp()];
        let w = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let gate = g[[c, 0]] * fusion.w3[[0, 0]] + g[[c, 1]] * fusion.w3[[1, 0]];
        for i in 0..2 {
            let attended = w[0] * bank[[c, 0, i]] + w[1] * bank[[c, 1, i]];
            let expected = g[[c, i]] + gate * attended;
            worst = worst.max((fwd.wg_star[[c, i]] - expected).abs());
        }
    }
    worst
}


pub mod grad {
    //! Finite-difference checks at C=3, K=2, D=8, M=4. Each returns the worst
    //! norm-wise relative error over the arrays it covers.

    use super::*;
    use cdbn::adapt::{StepBatch, step_loss_and_grads};
    use cdbn::branch::fuse_class_features_backward;
    use cdbn::objectives::{LossSwitches, consistency_loss};
    use cdbn::source::{LearnableClassTokens, source_loss_and_grad};

    pub const C: usize = 3;
    pub const K: usize = 2;
    pub const D: usize = 8;
    pub const M: usize = 4;
    const H: f64 = 1e-6;

    pub fn batch(seed: u64) -> StepBatch {
        let mut r = rng(seed);
        let x = unit_rows(6, D, &mut r);
        StepBatch {
            pseudo_features: unit_rows(5, D, &mut r),
            pseudo_labels: vec![0, 1, 2, 1, 0],
            weak: &x + &gaussian(x.dim(), 0.01, &mut r),
            strong: &x + &gaussian(x.dim(), 0.2, &mut r),
        }
    }

    pub fn model(gate: GateKind, scope: AttentionScope) -> Tiny {
        tiny(C, K, D, M, gate, scope, 6.0, 5)
    }

    /// Threshold halfway through the sorted weak confidences, so part of the
    /// batch is masked in.
    pub fn median_threshold(t: &Tiny, b: &StepBatch) -> f64 {
        let weak = t.model.forward(t.encoders.text.as_ref(), b.weak.view()).unwrap().probs;
        let mut conf: Vec<f64> = weak.rows().into_iter().map(|r| r.fold(0.0, |a: f64, &v| a.max(v))).collect();
        conf.sort_by(f64::total_cmp);
        let mid = conf.len() / 2;
        0.5 * (conf[mid - 1] + conf[mid])
    }

    pub fn objective(switches: LossSwitches, theta: Option<f64>, gate: GateKind, scope: AttentionScope) -> Vec<(&'static str, f64)> {
        let t = model(gate, scope);
        let text = t.encoders.text.as_ref();
        let b = batch(9);
        let theta = theta.unwrap_or_else(|| median_threshold(&t, &b));
        let out = step_loss_and_grads(&t.model, text, &b, switches, theta).unwrap();
        let numeric = numeric_grads(&t.model, |m| step_loss_and_grads(m, text, &b, switches, theta).unwrap().losses.total);
        compare(&out.grads, &numeric)
    }

    /// Returns whether the loss ignores the weak view entirely, and the error of
    /// the analytic gradient against differences with the weak prediction fixed.
    pub fn consistency_detached() -> (bool, f64) {
        let t = model(GateKind::Scalar, AttentionScope::PerClass);
        let text = t.encoders.text.as_ref();
        let b = batch(9);
        let switches = LossSwitches { ce: false, im: false, consistency: true };
        let theta = median_threshold(&t, &b);
        let base = step_loss_and_grads(&t.model, text, &b, switches, theta).unwrap();
        let mut flat = base.masked_fraction > 0.0;
        for i in 0..b.weak.len() {
            let mut p = b.clone();
            p.weak.as_slice_mut().unwrap()[i] += H;
            let moved = step_loss_and_grads(&t.model, text, &p, switches, theta).unwrap().losses.total;
            flat &= moved == base.losses.total;
        }
        let weak_fixed = t.model.forward(text, b.weak.view()).unwrap().probs;
        let numeric = numeric_grads(&t.model, |m| {
            let strong = m.forward(text, b.strong.view()).unwrap().probs;
            consistency_loss(weak_fixed.view(), strong.view(), theta).unwrap().loss
        });
        (flat, worst(&compare(&base.grads, &numeric)))
    }

    pub fn source_prompt(kernel: SimilarityKernel) -> f64 {
        let enc = encoders(C, D, D);
        let mut r = rng(3);
        let x = unit_rows(7, D, &mut r);
        let labels = vec![0, 1, 2, 0, 1, 2, 2];
        let tokens = LearnableClassTokens {
            tokens: gaussian((C, D), 0.5, &mut r),
        };
        let loss = |t: &LearnableClassTokens| source_loss_and_grad(t, enc.text.as_ref(), x.view(), &labels, 0.5, kernel).unwrap();
        let (_, g) = loss(&tokens);
        let numeric: Vec<f64> = (0..g.len())
            .map(|i| {
                let mut p = tokens.clone();
                p.tokens.as_slice_mut().unwrap()[i] += H;
                let mut n = tokens.clone();
                n.tokens.as_slice_mut().unwrap()[i] -= H;
                (loss(&p).0 - loss(&n).0) / (2.0 * H)
            })
            .collect();
        rel_err(g.as_slice().unwrap(), &numeric)
    }

    /// Gradients of `<W_g*, R>` for a fixed random `R` with respect to
    /// `W1`, `W2`, `W3` and the bank.
    pub fn fusion(gate: GateKind, scope: AttentionScope) -> f64 {
        let t = tiny(C, K, D, M, gate, scope, 1.0, 21);
        let m = &t.model;
        let probe = gaussian((C, D), 1.0, &mut rng(4));
        let g = m.source().features.view();
        let fwd = fuse_class_features(g, m.bank.values.view(), &m.fusion).unwrap();
        let grads = fuse_class_features_backward(g, m.bank.values.dim(), &m.fusion, &fwd, probe.view());
        let value = |f: &CrossAttentionFusion, bank: &Array3<f64>| {
            (&fuse_class_features(g, bank.view(), f).unwrap().wg_star * &probe).sum()
        };
        let analytic = [
            grads.w1.as_slice().unwrap(),
            grads.w2.as_slice().unwrap(),
            grads.w3.as_slice().unwrap(),
            grads.bank.as_slice().unwrap(),
        ];
        let mut worst_err: f64 = 0.0;
        for (which, a) in analytic.into_iter().enumerate() {
            let numeric: Vec<f64> = (0..a.len())
                .map(|i| {
                    let eval = |delta: f64| {
                        let mut f = m.fusion.clone();
                        let mut b = m.bank.values.clone();
                        match which {
                            0 => f.w1.as_slice_mut().unwrap()[i] += delta,
                            1 => f.w2.as_slice_mut().unwrap()[i] += delta,
                            2 => f.w3.as_slice_mut().unwrap()[i] += delta,
                            _ => b.as_slice_mut().unwrap()[i] += delta,
                        }
                        value(&f, &b)
                    };
                    (eval(H) - eval(-H)) / (2.0 * H)
                })
                .collect();
            worst_err = worst_err.max(rel_err(a, &numeric));
        }
        worst_err
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
