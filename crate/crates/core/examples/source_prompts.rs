// Few-shot source phase: learn one text token per class from 8 labeled
// samples per class, then freeze the resulting class features.

use cdbn::config::AdaptationConfig;
use cdbn::encoder::BackendRegistry;
use cdbn::pipeline::prepare_data;
use cdbn::source::{FewShotSourceSplit, nearest_class_accuracy, train_source_prompts};

pub fn run_example() -> cdbn::Result<()> {
    let cfg = AdaptationConfig::pinned_synthetic();
    let data = prepare_data(&cfg, &BackendRegistry::new())?;

    let split = FewShotSourceSplit::draw(&data.source_pool, data.class_names.len(), cfg.source.shots_per_class, 1)?;
    println!("{} labeled source samples", split.samples.len());

    let out = train_source_prompts(&split, &data.encoders, &data.class_names, &cfg.source_train_config())?;
    let first = out.loss_history.first().copied().unwrap_or_default();
    let last = out.loss_history.last().copied().unwrap_or_default();
    println!("loss {first:.4} -> {last:.4} over {} epochs", cfg.source.epochs);
    println!("trained arrays: {:?}", out.registry);

    let g = &out.class_features;
    println!("G^S [{} x {}], hash {}", g.num_classes(), g.dim(), &g.content_hash()[..12]);

    let labels = data.target_labels.clone().unwrap_or_default();
    let xt = data.encoders.image.encode_images(&data.target_ids)?;
    let acc = nearest_class_accuracy(xt.view(), g.features.view(), &labels, cfg.source.kernel)?;
    println!("source-only target accuracy {:.1}%", 100.0 * acc);
    Ok(())
}

fn main() -> cdbn::Result<()> {
    let _ = env_logger::try_init();
    run_example()
}
