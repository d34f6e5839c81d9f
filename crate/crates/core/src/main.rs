use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmodal::dataset::SplitName;
use xmodal::harness::{
    cmd_cross_eval, cmd_evaluate, cmd_grid, cmd_identify, cmd_prepare, cmd_train, Experiment,
    Overrides,
};

#[derive(Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Train and evaluate ear-to-face image translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render or validate the dataset and write the split assignment.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train the generator and discriminator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruction metrics on test splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate (repeatable); defaults to the config list.
        #[arg(long)]
        split: Vec<SplitName>,
    },
    /// CMC identification of reconstructed faces.
    Identify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "sd_test_1")]
        split: SplitName,
    },
    /// Evaluate a checkpoint trained on another dataset.
    CrossEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Label for the model in the report.
        #[arg(long)]
        model_label: Option<String>,
        #[arg(long)]
        split: Vec<SplitName>,
    },
    /// Image grid of ear / reconstruction / face columns.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pair ids, comma separated.
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<String>,
        /// Output PNG path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn experiment(c: &Common) -> xmodal::Result<Experiment> {
    Experiment::from_file(
        &c.config,
        &Overrides {
            seed: c.seed,
            out_dir: c.out.clone(),
        },
    )
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare { common } => {
            let p = cmd_prepare(&experiment(&common)?)?;
            println!(
                "{} pairs, splits written to {}",
                p.manifest.entries.len(),
                p.splits_path.display()
            );
        }
        Command::Train { common, resume } => {
            let o = cmd_train(&experiment(&common)?, resume.as_deref())?;
            println!(
                "{} steps, final checkpoint {}",
                o.steps,
                o.final_checkpoint.display()
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => {
            for r in cmd_evaluate(&experiment(&common)?, checkpoint.as_deref(), &split)? {
                print_report(&r);
            }
        }
        Command::Identify {
            common,
            checkpoint,
            split,
        } => {
            let r = cmd_identify(&experiment(&common)?, checkpoint.as_deref(), split)?;
            for (k, a) in r.ranks.iter().zip(&r.accuracies) {
                println!("rank-{k}: {:.1}%", 100.0 * a);
            }
            println!(
                "{} probes, {} gallery images, {} excluded",
                r.n_probe, r.n_gallery, r.excluded_probes
            );
        }
        Command::CrossEval {
            common,
            checkpoint,
            model_label,
            split,
        } => {
            let exp = experiment(&common)?;
            for r in cmd_cross_eval(&exp, &checkpoint, model_label.as_deref(), &split)? {
                print_report(&r);
            }
        }
        Command::Grid {
            common,
            checkpoint,
            pairs,
            output,
        } => {
            let p = cmd_grid(
                &experiment(&common)?,
                checkpoint.as_deref(),
                &pairs,
                output.as_deref(),
            )?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn print_report(r: &xmodal::metrics::MetricsReport) {
    println!(
        "{} on {} [{}]: n={} pixel={:.4} feature={:.4} style={:.4} psnr={:.2} ssim={:.4}",
        r.label.model,
        r.label.data,
        r.label.split,
        r.n_pairs,
        r.pixel_diff,
        r.feature_diff,
        r.style_diff,
        r.psnr_db,
        r.ssim
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
