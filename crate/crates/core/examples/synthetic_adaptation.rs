// Full run on the pinned two-domain task: source phase, bank, and 30 epochs
// of target adaptation for each seed. Checkpoints go to a temporary directory
// unless CDBN_CHECKPOINT_ROOT is set.

use cdbn::config::AdaptationConfig;
use cdbn::encoder::BackendRegistry;
use cdbn::pipeline::{prepare_data, run_pipeline};

pub fn run_example() -> cdbn::Result<()> {
    let cfg = AdaptationConfig::pinned_synthetic();
    let data = prepare_data(&cfg, &BackendRegistry::new())?;
    let tmp = tempfile::tempdir()?;
    let root = std::env::var_os("CDBN_CHECKPOINT_ROOT").map_or_else(|| tmp.path().to_path_buf(), Into::into);

    let run = run_pipeline(&data, &cfg, Some(&root))?;
    for (i, seed) in run.seeds.iter().enumerate() {
        println!(
            "seed {seed}: source-only {:.1}% -> adapted {:.1}%",
            100.0 * run.source_only_accuracy[i],
            100.0 * run.per_seed_accuracy[i]
        );
        let steps = &run.loss_history[i];
        if let (Some(a), Some(b)) = (steps.first(), steps.last()) {
            println!("  total loss {:.3} -> {:.3}, masked {:.2} -> {:.2}", a.total, b.total, a.masked_fraction, b.masked_fraction);
        }
    }
    println!("mean {:.2}%", 100.0 * run.mean_accuracy);
    for p in &run.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn main() -> cdbn::Result<()> {
    let _ = env_logger::try_init();
    run_example()
}
