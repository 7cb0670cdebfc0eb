// Zero-shot classification with the fixed "a photo of a <class>" prompt.
//
// No training: class features come straight from the frozen text encoder.
// Accuracy is high on the source domain and drops under the target shift.

use cdbn::config::AdaptationConfig;
use cdbn::data::SyntheticTask;
use cdbn::encoder::BackendRegistry;
use cdbn::pipeline::prepare_data;
use cdbn::source::{hand_prompt_features, nearest_class_accuracy};

pub fn run_example() -> cdbn::Result<()> {
    let cfg = AdaptationConfig::pinned_synthetic();
    let data = prepare_data(&cfg, &BackendRegistry::new())?;
    let g = hand_prompt_features(data.encoders.text.as_ref(), &data.class_names)?;

    let task = cdbn::data::generate_synthetic_task(&cfg.data.synthetic)?;
    for (domain, samples) in [("source", &task.source), ("target", &task.target)] {
        let x = SyntheticTask::stack(samples);
        let y: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let acc = nearest_class_accuracy(x.view(), g.features.view(), &y, cfg.source.kernel)?;
        println!("{domain:>6}: zero-shot accuracy {:.1}%", 100.0 * acc);
    }
    Ok(())
}

fn main() -> cdbn::Result<()> {
    let _ = env_logger::try_init();
    run_example()
}
