use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maskmatch::ablation::{self, AblationPlan};
use maskmatch::checkpoint::Checkpoint;
use maskmatch::config::TrainConfig;
use maskmatch::dataset::{self, Dataset, GenerateParams, Split};
use maskmatch::train;
use maskmatch::{Error, Result};

#[derive(Parser)]
#[command(name = "maskmatch", version, about = "Semi-supervised segmentation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 20)]
        labeled: usize,
        #[arg(long, default_value_t = 200)]
        unlabeled: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train(ConfigArgs),
    /// Evaluate the teacher of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0.0003)]
        tol_frac: f64,
    },
    /// Run the ablation matrix.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Also run the region/task variants and the mask strategies.
        #[arg(long)]
        extended: bool,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`, e.g. `--train.mode baseline`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        let mut it = self.overrides.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected `--key value`, got `{arg}`")))?;
            match flag.split_once('=') {
                Some((k, v)) => cfg.set(k, v)?,
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("missing value for `--{flag}`")))?;
                    cfg.set(flag, v)?;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            classes,
            height,
            width,
            labeled,
            unlabeled,
            val,
            seed,
        } => {
            let params = GenerateParams {
                num_classes: classes,
                height,
                width,
                labeled,
                unlabeled,
                val,
                seed,
            };
            dataset::generate_dataset(&params, &out)?;
            println!(
                "wrote {} images to {}",
                labeled + unlabeled + val,
                out.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let outcome = train::train(&cfg)?;
            print!("{}", outcome.metrics.table());
            println!("artifacts in {}", outcome.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            tol_frac,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let record = train::evaluate(&ckpt, &dataset, split, tol_frac)?;
            print!("{}", record.table());
        }
        Command::Ablate {
            config,
            seeds,
            extended,
        } => {
            let cfg = config.load()?;
            let plan = if extended {
                AblationPlan::extended(&seeds)
            } else {
                AblationPlan::modes(&seeds)
            };
            let report = ablation::run_ablation(&cfg, &plan)?;
            print!("{}", report.table());
            println!("results in {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
