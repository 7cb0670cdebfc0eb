//! Invariants over random inputs.

use cdbn::bank::{PseudoLabelRecord, select_top_k};
use cdbn::branch::fused_prediction;
use cdbn::config::AdaptationConfig;
use cdbn::encoder::SampleId;
use cdbn::math::{argmax, softmax_rows};
use cdbn::objectives::{LossSwitches, consistency_loss, information_maximization_loss};
use cdbn::report::{ReportRow, emit_csv, parse_csv};
use cdbn::source::FewShotSourceSplit;
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn probs(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    matrix(rows, cols).prop_map(|z| softmax_rows((z * 2.0).view()))
}

fn records() -> impl Strategy<Value = (Vec<PseudoLabelRecord>, usize)> {
    (1usize..6).prop_flat_map(|c| {
        prop::collection::vec((0..c, 0.0f64..1.0), 1..80).prop_map(move |v| {
            let recs = v
                .into_iter()
                .enumerate()
                .map(|(i, (class, conf))| PseudoLabelRecord {
                    sample_id: SampleId::new(format!("s{i}")),
                    pseudo_class: class,
                    // coarse grid so ties occur
                    confidence: (conf * 20.0).round() / 20.0,
                })
                .collect();
            (recs, c)
        })
    })
}

proptest! {
    #[test]
    fn argmax_dominates_its_row(z in matrix(6, 5)) {
        for row in z.rows() {
            let a = argmax(row);
            for (j, &v) in row.iter().enumerate() {
                prop_assert!(row[a] >= v);
                if v == row[a] {
                    prop_assert!(a <= j);
                }
            }
        }
    }

    #[test]
    fn consistency_mask_shrinks_as_threshold_rises(weak in probs(12, 4), strong in probs(12, 4), a in 0.05f64..1.0, b in 0.05f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let l = consistency_loss(weak.view(), strong.view(), lo).unwrap();
        let h = consistency_loss(weak.view(), strong.view(), hi).unwrap();
        for (ml, mh) in l.mask.iter().zip(&h.mask) {
            prop_assert!(*ml || !*mh);
        }
        prop_assert!(l.masked_fraction() >= h.masked_fraction());
        prop_assert!(l.loss >= h.loss - 1e-12);
    }

    #[test]
    fn information_maximization_is_bounded(p in probs(9, 5)) {
        let l = information_maximization_loss(p.view()).unwrap();
        prop_assert!(l <= 1e-9);
        prop_assert!(l >= -(5f64).ln() - 1e-9);
    }

    #[test]
    fn fused_probabilities_are_distributions(lf in matrix(5, 4), lg in matrix(5, 4), alpha in 0.0f64..=1.0, scale in 0.5f64..20.0) {
        let f = fused_prediction(lf, lg, alpha, scale).unwrap();
        for row in f.probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn top_k_invariants((recs, c) in records(), k in 1usize..10) {
        let set = select_top_k(&recs, c, k).unwrap();
        for (class, chosen) in set.per_class.iter().enumerate() {
            let pool: Vec<&PseudoLabelRecord> = recs.iter().filter(|r| r.pseudo_class == class).collect();
            prop_assert_eq!(chosen.len(), pool.len().min(k));
            prop_assert_eq!(set.saturated_classes.contains(&class), pool.len() < k);
            for w in chosen.windows(2) {
                prop_assert!(w[0].confidence >= w[1].confidence);
            }
            let floor = chosen.last().map_or(f64::INFINITY, |r| r.confidence);
            for r in &pool {
                if !chosen.iter().any(|s| s.sample_id == r.sample_id) {
                    prop_assert!(r.confidence <= floor);
                }
            }
            for s in chosen {
                prop_assert!(pool.iter().any(|r| *r == s));
            }
        }
    }

    #[test]
    fn top_k_ignores_nothing_but_order_among_ties((recs, c) in records(), k in 1usize..10) {
        let a = select_top_k(&recs, c, k).unwrap();
        let b = select_top_k(&recs, c, k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn report_round_trips(
        rows in prop::collection::vec(
            ("[a-z]{1,8}", "[a-z_=+0-9.]{1,12}", any::<bool>(), any::<bool>(), any::<bool>(), prop::collection::vec(0.0f64..1.0, 0..5)),
            0..6,
        )
    ) {
        let rows: Vec<ReportRow> = rows
            .into_iter()
            .map(|(task, setting, ce, im, consistency, accs)| {
                let mean = if accs.is_empty() { f64::NAN } else { accs.iter().sum::<f64>() / accs.len() as f64 };
                ReportRow { task, setting, losses: LossSwitches { ce, im, consistency }, mean_accuracy: mean, per_seed_accuracy: accs }
            })
            .collect();
        let parsed = parse_csv(&emit_csv(&rows).unwrap()).unwrap();
        prop_assert_eq!(parsed.len(), rows.len());
        for (p, r) in parsed.iter().zip(&rows) {
            prop_assert_eq!(&p.task, &r.task);
            prop_assert_eq!(&p.setting, &r.setting);
            prop_assert_eq!(p.losses, r.losses);
            prop_assert_eq!(&p.per_seed_accuracy, &r.per_seed_accuracy);
            prop_assert!(p.mean_accuracy == r.mean_accuracy || (p.mean_accuracy.is_nan() && r.mean_accuracy.is_nan()));
        }
    }

    #[test]
    fn few_shot_split_ignores_pool_order(seed in any::<u64>(), shots in 1usize..6, perm_seed in any::<u64>()) {
        use rand::SeedableRng;
        use rand::seq::SliceRandom;
        let pool: Vec<(SampleId, usize)> = (0..30).map(|i| (SampleId::new(format!("x{i:02}")), i % 3)).collect();
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let a = FewShotSourceSplit::draw(&pool, 3, shots, seed).unwrap();
        let b = FewShotSourceSplit::draw(&shuffled, 3, shots, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn config_round_trips(alpha in 0.0f64..=1.0, k in 1usize..32, theta in 0.01f64..=1.0, seeds in prop::collection::vec(any::<u32>(), 1..4)) {
        let mut cfg = AdaptationConfig::default();
        cfg.fusion.alpha_fuse = alpha;
        cfg.bank.k = k;
        cfg.objectives.theta_t = theta;
        cfg.adaptation.seeds = seeds.into_iter().map(u64::from).collect();
        let back = AdaptationConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
