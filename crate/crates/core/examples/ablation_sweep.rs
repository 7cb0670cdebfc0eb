// Loss ablation on the pinned task: each of the six loss combinations for
// one seed, printed as a table. Shorter than the acceptance run.

use cdbn::config::AdaptationConfig;
use cdbn::encoder::BackendRegistry;
use cdbn::pipeline::{prepare_data, run_sweep};
use cdbn::report::{ReportRow, render_table};
use cdbn::SweepAxis;

pub fn run_example() -> cdbn::Result<()> {
    let mut cfg = AdaptationConfig::pinned_synthetic();
    cfg.adaptation.seeds = vec![1];
    cfg.adaptation.epochs = 10;
    let data = prepare_data(&cfg, &BackendRegistry::new())?;

    let cells = run_sweep(&data, &cfg, &SweepAxis::default_losses())?;
    let rows: Vec<ReportRow> = cells.iter().map(|c| ReportRow::from_cell("synthetic", c)).collect();
    print!("{}", render_table(&rows));
    Ok(())
}

fn main() -> cdbn::Result<()> {
    let _ = env_logger::try_init();
    run_example()
}
