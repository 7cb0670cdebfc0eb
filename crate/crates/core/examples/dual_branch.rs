// One forward pass of the dual-branch model: the transfer branch refines
// source class features by attending over the bank, the target branch
// encodes a soft prompt, and the two cosine logits are blended.

use cdbn::adapt::TargetSet;
use cdbn::branch::DualBranchModel;
use cdbn::config::AdaptationConfig;
use cdbn::encoder::BackendRegistry;
use cdbn::pipeline::{bank_stage, init_model, prepare_data, source_stage};

pub fn run_example() -> cdbn::Result<()> {
    let cfg = AdaptationConfig::pinned_synthetic();
    let data = prepare_data(&cfg, &BackendRegistry::new())?;
    let gs = source_stage(&data, &cfg, 1, None)?.features;
    let target = TargetSet::encode(data.target_ids.clone(), &data.encoders)?;
    let bank = bank_stage(&gs, &target, &data, &cfg, None)?.bank;
    let mut model = init_model(gs, bank, &data, &cfg, 1)?;
    println!("trainable: {:?}", model.trainable_names());

    let text = data.encoders.text.as_ref();
    let heads = model.class_heads(text)?;
    // W3 starts at zero, so the refined features equal G^S
    let drift = (&heads.fusion.wg_star - &model.source().features).mapv(f64::abs).sum();
    println!("|W_g* - G^S| at init: {drift:e}");

    model.fusion.w3.fill(0.5);
    let heads = model.class_heads(text)?;
    println!("per-class gates after setting W3: {:?}", heads.fusion.gates.column(0).to_vec());

    // one target sample from each class block
    let rows: Vec<usize> = (0..target.ids.len()).step_by(target.ids.len() / 5).take(5).collect();
    let x = target.features.select(ndarray::Axis(0), &rows);
    let pred = model.predict(&heads, x.view())?;
    let (lf, lg, fused) = DualBranchModel::branch_argmax(&pred);
    println!("transfer argmax {lf:?}");
    println!("target   argmax {lg:?}");
    println!("fused    argmax {fused:?}");
    Ok(())
}

fn main() -> cdbn::Result<()> {
    let _ = env_logger::try_init();
    run_example()
}
