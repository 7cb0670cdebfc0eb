// Sweep the bank size, write the results as CSV, read them back and render
// the aligned table.

use cdbn::config::AdaptationConfig;
use cdbn::encoder::BackendRegistry;
use cdbn::pipeline::{prepare_data, run_sweep};
use cdbn::report::{ReportRow, emit_csv, parse_csv, render_table};
use cdbn::SweepAxis;

pub fn run_example() -> cdbn::Result<()> {
    let mut cfg = AdaptationConfig::pinned_synthetic();
    cfg.adaptation.seeds = vec![1, 2];
    cfg.adaptation.epochs = 5;
    let data = prepare_data(&cfg, &BackendRegistry::new())?;

    let cells = run_sweep(&data, &cfg, &SweepAxis::K(vec![1, 4, 8]))?;
    let rows: Vec<ReportRow> = cells.iter().map(|c| ReportRow::from_cell("synthetic", c)).collect();
    let csv = emit_csv(&rows)?;
    print!("{csv}");
    let parsed = parse_csv(&csv)?;
    assert_eq!(parsed, rows);
    print!("{}", render_table(&parsed));
    Ok(())
}

fn main() -> cdbn::Result<()> {
    let _ = env_logger::try_init();
    run_example()
}
