use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdbn::checkpoint::{RunLayout, SOURCE_FEATURES_FILE, load_source_features};
use cdbn::config::{AdaptationConfig, ConfigOverrides};
use cdbn::data::{generate_synthetic_task, write_synthetic_task};
use cdbn::encoder::BackendRegistry;
use cdbn::pipeline::{adapt_stage, bank_stage, default_root, evaluate_stage, prepare_data, run_pipeline, run_sweep, source_stage};
use cdbn::report::{ReportRow, emit_csv, read_csv, render_table};
use cdbn::{LossSwitches, SweepAxis, TargetSet};

#[derive(Parser)]
#[command(name = "cdbn", version, about = "Few-shot source-free domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output.checkpoint_root`.
    #[arg(long, env = "CDBN_CHECKPOINT_ROOT")]
    checkpoint_root: Option<PathBuf>,
    #[arg(long)]
    alpha_fuse: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    theta_t: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum_beta: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    bank_trainable: Option<bool>,
    #[arg(long)]
    shots: Option<usize>,
    /// `+`-joined terms, e.g. `ce+im+consistency`.
    #[arg(long)]
    losses: Option<String>,
}

impl Common {
    fn load(&self) -> cdbn::Result<AdaptationConfig> {
        let mut cfg = match &self.config {
            Some(p) => AdaptationConfig::load(p)?,
            None => AdaptationConfig::default(),
        };
        if self.checkpoint_root.is_some() {
            cfg.output.checkpoint_root = self.checkpoint_root.clone();
        }
        ConfigOverrides {
            alpha_fuse: self.alpha_fuse,
            k: self.k,
            m: self.m,
            theta_t: self.theta_t,
            tau: self.tau,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum_beta: self.momentum_beta,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            seeds: self.seeds.clone(),
            bank_trainable: self.bank_trainable,
            shots: self.shots,
            losses: self.losses.as_deref().map(LossSwitches::parse).transpose()?,
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn frozen class text features from the few-shot source split.
    SourceTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Pseudo-label the target domain and store the feature bank.
    BuildBank {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the dual-branch model on the target domain from stored class features.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Score a stored model on the labeled target set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run every seed for each value of one hyperparameter and write a CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha_fuse, k, source_shots or loss_combination.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic task to a directory of `.vec` files.
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a result CSV, or run all seeds and print the table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn layout(cfg: &AdaptationConfig, seed: u64) -> RunLayout {
    RunLayout::new(&default_root(cfg), cfg.output.task_name.as_deref().unwrap_or("task"), seed)
}

fn run(cli: Cli) -> cdbn::Result<()> {
    let registry = BackendRegistry::new();
    match cli.command {
        Command::SourceTrain { common, seed } => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg, &registry)?;
            let dir = layout(&cfg, seed).source_dir();
            let out = source_stage(&data, &cfg, seed, Some(&dir))?;
            println!("G^S {} (loss {:.4}) -> {}", out.features.content_hash(), out.final_loss, dir.display());
        }
        Command::BuildBank { common, seed } => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg, &registry)?;
            let l = layout(&cfg, seed);
            let source = load_source_features(&l.source_dir().join(SOURCE_FEATURES_FILE))?;
            let target = TargetSet::encode(data.target_ids.clone(), &data.encoders)?;
            let out = bank_stage(&source, &target, &data, &cfg, Some(&l.bank_dir()))?;
            println!("bank {:?} per class -> {}", out.selected.class_histogram(), l.bank_dir().display());
        }
        Command::Adapt { common, seed } => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg, &registry)?;
            let l = layout(&cfg, seed);
            let (_, outcome) = adapt_stage(&l.source_dir().join(SOURCE_FEATURES_FILE), &data, &cfg, seed, Some(&l))?;
            if let Some(e) = &outcome.final_eval {
                println!("accuracy {:.4} (epoch {})", e.accuracy, outcome.kept_epoch);
            }
            println!("checkpoint -> {}", l.adapt_dir().display());
        }
        Command::Evaluate { common, seed } => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg, &registry)?;
            let e = evaluate_stage(&data, &layout(&cfg, seed))?;
            println!(
                "accuracy {:.4}  transfer {:.4}  target {:.4}",
                e.accuracy, e.transfer_accuracy, e.target_accuracy
            );
            for (c, a) in e.per_class_accuracy.iter().enumerate() {
                println!("  class {c}: {a:.4}");
            }
        }
        Command::Sweep { common, axis, out } => {
            let cfg = common.load()?;
            let data = prepare_data(&cfg, &registry)?;
            let cells = run_sweep(&data, &cfg, &SweepAxis::parse(&axis)?)?;
            let task = cfg.output.task_name.as_deref().unwrap_or("task");
            let rows: Vec<ReportRow> = cells.iter().map(|c| ReportRow::from_cell(task, c)).collect();
            match out {
                Some(p) => std::fs::write(&p, emit_csv(&rows)?)?,
                None => print!("{}", emit_csv(&rows)?),
            }
            eprint!("{}", render_table(&rows));
        }
        Command::SynthGen { common, out } => {
            let cfg = common.load()?;
            let task = generate_synthetic_task(&cfg.data.synthetic)?;
            write_synthetic_task(&task, &out)?;
            println!("{} source, {} target samples -> {}", task.source.len(), task.target.len(), out.display());
        }
        Command::Report { common, input } => {
            let rows = match input {
                Some(p) => read_csv(&p)?,
                None => {
                    let cfg = common.load()?;
                    let data = prepare_data(&cfg, &registry)?;
                    let r = run_pipeline(&data, &cfg, Some(&default_root(&cfg)))?;
                    vec![ReportRow {
                        task: cfg.output.task_name.clone().unwrap_or_else(|| "task".into()),
                        setting: "config".into(),
                        losses: cfg.objectives.losses,
                        mean_accuracy: r.mean_accuracy,
                        per_seed_accuracy: r.per_seed_accuracy,
                    }]
                }
            };
            print!("{}", render_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
