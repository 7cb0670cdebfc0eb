// The stages as separate steps with files in between, on a dataset written to
// disk. The adaptation step is handed only the stored class features and the
// target domain; its manifest lists what it read.

use cdbn::checkpoint::{RunLayout, SOURCE_FEATURES_FILE, StageManifest};
use cdbn::config::{AdaptationConfig, DataKind};
use cdbn::data::{generate_synthetic_task, write_synthetic_task};
use cdbn::encoder::BackendRegistry;
use cdbn::pipeline::{adapt_stage, evaluate_stage, prepare_data, source_stage};

pub fn run_example() -> cdbn::Result<()> {
    let tmp = tempfile::tempdir()?;
    let mut cfg = AdaptationConfig::pinned_synthetic();
    cfg.adaptation.epochs = 10;

    let dataset = tmp.path().join("dataset");
    write_synthetic_task(&generate_synthetic_task(&cfg.data.synthetic)?, &dataset)?;
    cfg.data.kind = DataKind::Directory;
    cfg.data.root = Some(dataset);
    let data = prepare_data(&cfg, &BackendRegistry::new())?;
    println!("{} classes, {} source / {} target samples", data.class_names.len(), data.source_pool.len(), data.target_ids.len());

    let layout = RunLayout::new(&tmp.path().join("runs"), "synthetic", 1);
    let src = source_stage(&data, &cfg, 1, Some(&layout.source_dir()))?;
    println!("source stage done, loss {:.4}", src.final_loss);

    let (_, outcome) = adapt_stage(&layout.source_dir().join(SOURCE_FEATURES_FILE), &data, &cfg, 1, Some(&layout))?;
    println!("kept epoch {}", outcome.kept_epoch);

    let manifest = StageManifest::load(&layout.adapt_dir())?;
    println!("adapt read {} file(s) and {} target ids", manifest.files.len(), manifest.sample_ids.len());

    let report = evaluate_stage(&data, &layout)?;
    println!(
        "fused {:.1}%, transfer branch {:.1}%, target branch {:.1}%",
        100.0 * report.accuracy,
        100.0 * report.transfer_accuracy,
        100.0 * report.target_accuracy
    );
    Ok(())
}

fn main() -> cdbn::Result<()> {
    let _ = env_logger::try_init();
    run_example()
}
