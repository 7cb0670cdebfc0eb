// Pseudo-label the target domain with frozen source features, keep the K most
// confident samples per class, and stack them into the feature bank.

use cdbn::adapt::TargetSet;
use cdbn::bank::{assign_pseudo_labels, build_feature_bank, select_top_global, select_top_k};
use cdbn::config::AdaptationConfig;
use cdbn::encoder::BackendRegistry;
use cdbn::pipeline::{prepare_data, source_stage};

pub fn run_example() -> cdbn::Result<()> {
    let cfg = AdaptationConfig::pinned_synthetic();
    let data = prepare_data(&cfg, &BackendRegistry::new())?;
    let gs = source_stage(&data, &cfg, 1, None)?.features;
    let target = TargetSet::encode(data.target_ids.clone(), &data.encoders)?;

    let records = assign_pseudo_labels(&target.ids, target.features.view(), &gs, cfg.adaptation.tau, cfg.source.kernel)?;
    let labels = data.target_labels.as_deref().unwrap_or_default();
    let correct = records.iter().zip(labels).filter(|(r, y)| r.pseudo_class == **y).count();
    println!("pseudo-label accuracy on all {} targets: {:.1}%", records.len(), 100.0 * correct as f64 / records.len() as f64);

    let set = select_top_k(&records, gs.num_classes(), cfg.bank.k)?;
    println!("per-class top-{}: {:?}", cfg.bank.k, set.class_histogram());
    let global = select_top_global(&records, gs.num_classes() * cfg.bank.k);
    let mut global_hist = vec![0; gs.num_classes()];
    for r in &global {
        global_hist[r.pseudo_class] += 1;
    }
    println!("global top-{}: {:?}", global.len(), global_hist);

    let bank = build_feature_bank(&set, data.encoders.image.as_ref(), cfg.bank.trainable)?;
    println!("bank {:?}, checksum {}", bank.values.dim(), &bank.checksum()[..12]);
    for (c, slots) in bank.slots.iter().enumerate() {
        let confs: Vec<String> = slots.iter().map(|s| format!("{:.3}", s.confidence)).collect();
        println!("  class {c}: {}", confs.join(" "));
    }
    Ok(())
}

fn main() -> cdbn::Result<()> {
    let _ = env_logger::try_init();
    run_example()
}
