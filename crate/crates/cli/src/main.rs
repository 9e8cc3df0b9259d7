mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use msn_core::evaluation::render_markdown;
use msn_core::pipeline::{self, RunDir, Variant};
use msn_core::{MsnError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "msn", version, about = "Multi-resolution segmentation of virtual gigapixel slides")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate virtual slides and their train/sub-train/test split.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Detect the gap layers of branches 1 and 2 and plot the layer statistics.
    AnalyzeGaps {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run one training step.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        step: u8,
        #[arg(long)]
        run: PathBuf,
        /// Train steps 2 and 3 on the training split instead of the sub-training split.
        #[arg(long)]
        use_train_split: bool,
        #[arg(long)]
        force: bool,
    },
    /// Score the test split and write reports and stitched predictions.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Also score the ablation methods; needs the train-split checkpoints.
        #[arg(long)]
        ablations: bool,
        #[arg(long)]
        force: bool,
    },
    /// Write one of the diagnostic plots to `plots/`.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        what: PlotKind,
        #[arg(long)]
        use_train_split: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Gaps,
    Trend,
    FusionTrend,
}

fn exit_code(e: &MsnError) -> u8 {
    match e {
        MsnError::Config(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, force } => {
            let cfg = RunConfig::load(&config)?;
            cfg.validate()?;
            let run = RunDir::new(out);
            let _lock = run.lock()?;
            let digests = pipeline::gen_data(&cfg, &run, force)?;
            for (id, digest) in digests {
                println!("slide {id:010} {digest}");
            }
        }
        Command::AnalyzeGaps { run, force } => {
            let run = RunDir::new(run);
            let _lock = run.lock()?;
            let profiles = pipeline::analyze_gaps(&run, force)?;
            for p in &profiles {
                let note = if p.fallback { " (fallback)" } else { "" };
                println!("X{} gap layers {:?}{note}", p.branch, p.gap_layers);
            }
            println!("{}", plot::gaps(&run)?.display());
        }
        Command::Train {
            step,
            run,
            use_train_split,
            force,
        } => {
            let run = RunDir::new(run);
            let _lock = run.lock()?;
            let variant = Variant::from_flag(use_train_split);
            if step == 1 && use_train_split {
                return Err(MsnError::Config("--use-train-split applies to steps 2 and 3 only".into()));
            }
            let logs = match step {
                1 => vec![pipeline::train_step1(&run, force)?],
                2 => vec![pipeline::train_step2(&run, variant, force)?],
                _ => {
                    let logs = pipeline::train_step3(&run, variant, force)?;
                    vec![logs.meta, logs.direct]
                }
            };
            for log in logs {
                for r in &log.records {
                    info!("{} epoch {}: loss {:.4}, probe mIoU {:?}", r.head, r.epoch, r.loss, r.miou);
                }
            }
            println!("{}", run.step(step as usize, variant).display());
        }
        Command::Evaluate { run, ablations, force } => {
            let run = RunDir::new(run);
            let _lock = run.lock()?;
            let reports = pipeline::evaluate(&run, ablations, force)?;
            print!("{}", render_markdown(&reports));
        }
        Command::Plot {
            run,
            what,
            use_train_split,
        } => {
            let run = RunDir::new(run);
            let _lock = run.lock()?;
            let variant = Variant::from_flag(use_train_split);
            let path = match what {
                PlotKind::Gaps => plot::gaps(&run)?,
                PlotKind::Trend => plot::trend(&run, variant)?,
                PlotKind::FusionTrend => plot::fusion_trend(&run, variant)?,
            };
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
