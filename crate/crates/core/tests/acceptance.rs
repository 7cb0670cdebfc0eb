//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! `cargo test --test acceptance` runs criteria 1-7. Criterion 8 needs a
//! pretrained backend and reports SKIP when none is registered.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cdbn::adapt::{PseudoLabeledSubset, TargetSet, run_adaptation};
use cdbn::branch::{AttentionScope, GateKind, fused_prediction};
use cdbn::config::AdaptationConfig;
use cdbn::encoder::{BackendRegistry, PretrainedSpec};
use cdbn::math::argmax;
use cdbn::objectives::{LossSwitches, consistency_loss, information_maximization_loss};
use cdbn::pipeline::{bank_stage, init_model, prepare_data, run_pipeline, run_sweep, source_stage};
use cdbn::source::nearest_class_accuracy;
use cdbn::SweepAxis;
use common::{grad, rng, worst};
use ndarray::{Array2, array};

const GRAD_TOL: f64 = 1e-4;
const FUSION_ORACLE_TOL: f64 = 1e-10;
const IM_TOL: f64 = 1e-6;
const MIN_DOMAIN_GAP: f64 = 0.10;
const MIN_GAIN: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradients() -> Outcome {
    let mut worst_err: f64 = 0.0;
    let s = |ce, im, consistency| LossSwitches { ce, im, consistency };
    for (switches, theta) in [
        (s(true, false, false), Some(0.95)),
        (s(false, false, true), None),
        (s(false, true, false), Some(0.95)),
        (LossSwitches::default(), None),
    ] {
        worst_err = worst_err.max(worst(&grad::objective(switches, theta, GateKind::Scalar, AttentionScope::PerClass)));
    }
    for kernel in [cdbn::source::SimilarityKernel::Cosine, cdbn::source::SimilarityKernel::Dot] {
        worst_err = worst_err.max(grad::source_prompt(kernel));
    }
    worst_err = worst_err.max(grad::fusion(GateKind::Scalar, AttentionScope::PerClass));
    let (flat, detached_err) = grad::consistency_detached();
    worst_err = worst_err.max(detached_err);
    outcome(
        worst_err <= GRAD_TOL && flat,
        format!("max relative error {worst_err:.2e} (tol {GRAD_TOL:.0e}), weak view detached: {flat}"),
    )
}

fn frozen_assets() -> Outcome {
    let mut cfg = AdaptationConfig::pinned_synthetic();
    cfg.adaptation.epochs = 5;
    let data = prepare_data(&cfg, &BackendRegistry::new()).unwrap();
    let digest_before = data.encoders.parameter_digest();
    let source = source_stage(&data, &cfg, 1, None).unwrap().features;
    let bytes = |m: &Array2<f64>| m.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    let gs_before = bytes(&source.features);
    let target = TargetSet::encode(data.target_ids.clone(), &data.encoders).unwrap();
    let banked = bank_stage(&source, &target, &data, &cfg, None).unwrap();
    let pseudo = PseudoLabeledSubset::from_high_confidence(&banked.selected, &target).unwrap();
    let model = init_model(source, banked.bank, &data, &cfg, 1).unwrap();
    let run = run_adaptation(model, &data.encoders, &target, &pseudo, None, &cfg, 1, None).unwrap();

    let encoders_same = data.encoders.parameter_digest() == digest_before;
    let gs_same = bytes(&run.model.source().features) == gs_before && run.model.verify_source().is_ok();
    let registry: BTreeSet<&str> = run.registry.iter().map(String::as_str).collect();
    let expected: BTreeSet<&str> = ["W1", "W2", "W3", "T_t", "W_e"].into_iter().collect();
    outcome(
        encoders_same && gs_same && registry == expected,
        format!("encoders unchanged: {encoders_same}, G^S unchanged: {gs_same}, registry {registry:?}"),
    )
}

fn oracles() -> Outcome {
    let mismatches = common::top_k_oracle_mismatches(2);
    let diff = common::fusion_oracle_max_diff();
    outcome(
        mismatches == 0 && diff <= FUSION_ORACLE_TOL,
        format!("top-K mismatches {mismatches} over 200 samples, fusion max diff {diff:.1e}"),
    )
}

fn loss_extremes() -> Outcome {
    let c = 4;
    let uniform = Array2::from_elem((8, c), 1.0 / c as f64);
    let mut collapsed = Array2::zeros((8, c));
    collapsed.column_mut(2).fill(1.0);
    let mut diverse = Array2::zeros((8, c));
    for i in 0..8 {
        diverse[[i, i % c]] = 1.0;
    }
    let im_uniform = information_maximization_loss(uniform.view()).unwrap();
    let im_collapsed = information_maximization_loss(collapsed.view()).unwrap();
    let im_diverse = information_maximization_loss(diverse.view()).unwrap();
    let target = -(c as f64).ln();

    let weak = array![[0.94, 0.03, 0.02, 0.01], [0.5, 0.3, 0.1, 0.1], [0.25, 0.25, 0.25, 0.25]];
    let strong = array![[0.1, 0.7, 0.1, 0.1], [0.05, 0.05, 0.8, 0.1], [0.4, 0.3, 0.2, 0.1]];
    let cons = consistency_loss(weak.view(), strong.view(), 0.95).unwrap().loss;

    let pass = im_uniform.abs() <= IM_TOL
        && im_collapsed.abs() <= IM_TOL
        && (im_diverse - target).abs() <= IM_TOL
        && cons == 0.0;
    outcome(
        pass,
        format!(
            "IM uniform {im_uniform:.1e}, collapsed {im_collapsed:.1e}, diverse {im_diverse:.6} (want {target:.6}), consistency below threshold {cons}"
        ),
    )
}

fn fusion_degeneracy() -> Outcome {
    let mut r = rng(17);
    let (n, c) = (1000, 6);
    let lf = common::gaussian((n, c), 1.0, &mut r);
    let lg = common::gaussian((n, c), 1.0, &mut r);
    let arg = |m: &Array2<f64>| m.rows().into_iter().map(argmax).collect::<Vec<_>>();
    let (af, ag) = (arg(&lf), arg(&lg));
    let at = |alpha: f64| arg(&fused_prediction(lf.clone(), lg.clone(), alpha, 1.0).unwrap().probs);
    let endpoints = at(1.0) == af && at(0.0) == ag;

    let mut shared_ok = true;
    let mut shared = 0;
    for step in 0..=10 {
        let fused = at(step as f64 / 10.0);
        for i in 0..n {
            if af[i] == ag[i] {
                shared += usize::from(step == 0);
                shared_ok &= fused[i] == af[i];
            }
        }
    }

    // Each branch ranks a different wrong class first and the true class
    // (index 2) second; only the blend recovers it.
    let lf_adv = array![[0.9, 0.0, 0.8], [0.0, 0.9, 0.8]];
    let lg_adv = array![[0.0, 0.9, 0.8], [0.9, 0.0, 0.8]];
    let adv = |alpha: f64| {
        arg(&fused_prediction(lf_adv.clone(), lg_adv.clone(), alpha, 1.0).unwrap().probs)
            .iter()
            .filter(|&&p| p == 2)
            .count()
    };
    let blend_wins = adv(0.5) == 2 && adv(0.0) == 0 && adv(1.0) == 0;
    outcome(
        endpoints && shared_ok && blend_wins,
        format!(
            "endpoints reduce to single branches: {endpoints}, {shared} shared-argmax rows stable on the 0.1 grid: {shared_ok}, blend beats both branches on disagreeing pairs: {blend_wins}"
        ),
    )
}

fn end_to_end() -> Outcome {
    let cfg = AdaptationConfig::pinned_synthetic();
    let data = prepare_data(&cfg, &BackendRegistry::new()).unwrap();
    let run = run_pipeline(&data, &cfg, None).unwrap();
    let ids: Vec<_> = data.source_pool.iter().map(|(id, _)| id.clone()).collect();
    let labels: Vec<usize> = data.source_pool.iter().map(|(_, y)| *y).collect();
    let xs = data.encoders.image.encode_images(&ids).unwrap();

    let mut all_ok = true;
    let mut lines = Vec::new();
    for (i, &seed) in run.seeds.iter().enumerate() {
        let gs = source_stage(&data, &cfg, seed, None).unwrap().features;
        let src_acc = nearest_class_accuracy(xs.view(), gs.features.view(), &labels, cfg.source.kernel).unwrap();
        let base = run.source_only_accuracy[i];
        let adapted = run.per_seed_accuracy[i];
        let ok = src_acc - base >= MIN_DOMAIN_GAP && adapted - base >= MIN_GAIN;
        all_ok &= ok;
        lines.push(format!(
            "seed {seed}: source domain {:.1}%, target source-only {:.1}%, adapted {:.1}% ({:+.1})",
            100.0 * src_acc,
            100.0 * base,
            100.0 * adapted,
            100.0 * (adapted - base)
        ));
    }
    let mean_gain = run.mean_accuracy - common::mean(&run.source_only_accuracy);
    outcome(
        all_ok && mean_gain >= MIN_GAIN,
        format!("mean gain {:+.1} points; {}", 100.0 * mean_gain, lines.join("; ")),
    )
}

fn ablation_directions() -> Outcome {
    let cfg = AdaptationConfig::pinned_synthetic();
    let data = prepare_data(&cfg, &BackendRegistry::new()).unwrap();
    let s = |ce, im, consistency| LossSwitches { ce, im, consistency };
    let singles = [s(true, false, false), s(false, true, false), s(false, false, true)];
    let mut combos = singles.to_vec();
    combos.push(LossSwitches::default());
    let loss_cells = run_sweep(&data, &cfg, &SweepAxis::LossCombination(combos)).unwrap();
    let all = loss_cells.last().unwrap().mean_accuracy;
    let best_single = loss_cells[..3].iter().map(|c| c.mean_accuracy).fold(f64::NEG_INFINITY, f64::max);

    let k_cells = run_sweep(&data, &cfg, &SweepAxis::K(vec![1, 8])).unwrap();
    let (k1, k8) = (k_cells[0].mean_accuracy, k_cells[1].mean_accuracy);
    let singles_text: Vec<String> = loss_cells[..3]
        .iter()
        .map(|c| format!("{} {:.2}", c.value, 100.0 * c.mean_accuracy))
        .collect();
    outcome(
        all >= best_single && k8 >= k1,
        format!(
            "all losses {:.2} vs singles [{}]; K=8 {:.2} vs K=1 {:.2}",
            100.0 * all,
            singles_text.join(", "),
            100.0 * k8,
            100.0 * k1
        ),
    )
}

/// Only meaningful with a registered pretrained backend and benchmark data.
fn zero_shot_reproduction() -> Option<Outcome> {
    let registry = BackendRegistry::new();
    let spec = PretrainedSpec {
        model_name: std::env::var("CDBN_PRETRAINED_MODEL").unwrap_or_default(),
        weights_path: std::env::var("CDBN_PRETRAINED_WEIGHTS").unwrap_or_default().into(),
        class_names: Vec::new(),
    };
    registry.resolve(&spec).ok().map(|_| outcome(false, "pretrained evaluation is not wired into this build"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient suite", gradients),
        ("frozen-asset suite", frozen_assets),
        ("oracle-equivalence suite", oracles),
        ("loss-extremal suite", loss_extremes),
        ("fusion-degeneracy suite", fusion_degeneracy),
        ("end-to-end synthetic adaptation", end_to_end),
        ("ablation directions", ablation_directions),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        let elapsed: Duration = start.elapsed();
        failed += usize::from(!o.pass);
        println!(
            "criterion {} {name}: {} ({:.1}s) {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            o.detail
        );
    }
    match zero_shot_reproduction() {
        Some(o) => {
            failed += usize::from(!o.pass);
            println!("criterion 8 zero-shot reproduction: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        }
        None => println!("criterion 8 zero-shot reproduction: SKIP (no pretrained backend registered)"),
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
