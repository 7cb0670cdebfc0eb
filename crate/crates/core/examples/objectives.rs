// The three target-phase losses on hand-made probability batches.

use cdbn::objectives::{
    EmbeddingAugment, LossSwitches, consistency_loss, information_maximization_loss, pseudo_label_ce, total_loss,
};
use cdbn::source::one_hot;
use ndarray::array;
use rand::SeedableRng;

pub fn run_example() -> cdbn::Result<()> {
    let probs = array![[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6]];
    let ce = pseudo_label_ce(probs.view(), one_hot(&[0, 1, 2], 3).view())?;
    println!("pseudo-label CE {ce:.4}");

    let weak = array![[0.97, 0.02, 0.01], [0.6, 0.3, 0.1]];
    let strong = array![[0.5, 0.4, 0.1], [0.1, 0.8, 0.1]];
    let cons = consistency_loss(weak.view(), strong.view(), 0.95)?;
    println!("consistency {:.4}, mask {:?}", cons.loss, cons.mask);

    let collapsed = array![[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]];
    let diverse = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    println!(
        "IM collapsed {:.4}, diverse {:.4}",
        information_maximization_loss(collapsed.view())?,
        information_maximization_loss(diverse.view())?
    );
    let im = information_maximization_loss(probs.view())?;
    println!("total {:?}", total_loss(ce, cons.loss, im)?);

    let aug = EmbeddingAugment::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = array![[0.6, 0.8, 0.0], [0.0, 0.6, 0.8]];
    let views = aug.views(x.view(), &mut rng);
    println!("weak view\n{:.3}\nstrong view\n{:.3}", views.weak, views.strong);

    let rows: Vec<String> = LossSwitches::ablation_grid().iter().map(LossSwitches::label).collect();
    println!("ablation rows: {}", rows.join(", "));
    Ok(())
}

fn main() -> cdbn::Result<()> {
    let _ = env_logger::try_init();
    run_example()
}
