use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use he2ihc::{
    cmd_ablate, cmd_evaluate, cmd_prepare, cmd_report, cmd_synthesize, cmd_train, cmd_translate, SyntheticStainSpec,
};
use he2ihc_core::data::Split;
use he2ihc_core::error::{Error, ErrorClass, Result};
use he2ihc_core::metrics::default_extractor;
use he2ihc_core::train::{RunOptions, TrainConfig};

#[derive(Parser)]
#[command(name = "he2ihc", version, about = "H&E to IHC stain translation")]
struct Cli {
    /// Training config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config or synthetic spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write paired synthetic tiles to `<out>/trainA|trainB`.
    Synthesize {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        test_count: usize,
    },
    /// Pair a dataset root into a manifest, optionally materializing samples.
    Prepare {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        materialize: usize,
    },
    /// Train on a dataset root or manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Translate every PNG in a directory with a checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score generated tiles against same-named real tiles.
    Evaluate {
        #[arg(long)]
        fake: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long, default_value = "model")]
        method: String,
    },
    /// Train and score the four ablation configurations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Merge report JSON files into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synthesize { count, size, test_count } => {
            let spec = SyntheticStainSpec {
                count: *count,
                size: *size,
                seed: cli.seed.unwrap_or(0),
                test_count: *test_count,
            };
            let written = cmd_synthesize(&spec, out_dir(cli)?)?;
            println!("wrote {} pairs", written.len());
        }
        Command::Prepare { root, split, materialize } => {
            let cfg = load_config(cli)?;
            let summary = cmd_prepare(root, out_dir(cli)?, *split, &cfg.effective_policy(), *materialize, cfg.seed)?;
            println!("{} pairs -> {}", summary.pairs, summary.manifest.display());
            for (b, n) in &summary.branch_counts {
                println!("  {b}: {n}");
            }
        }
        Command::Train { data, resume } => {
            let cfg = load_config(cli)?;
            let opts = RunOptions {
                resume: *resume,
                stop_after: None,
            };
            let outcome = cmd_train(&cfg, data, out_dir(cli)?, &opts)?;
            println!("iteration {} -> {}", outcome.state.t, outcome.checkpoint.display());
        }
        Command::Translate { checkpoint, input } => {
            let written = cmd_translate(checkpoint, input, out_dir(cli)?)?;
            println!("translated {} tiles", written.len());
        }
        Command::Evaluate { fake, real, method } => {
            let fx = default_extractor()?;
            let report = cmd_evaluate(fake, real, &fx, method, Some(out_dir(cli)?))?;
            println!("{}", he2ihc_core::metrics::reports_to_csv(&[report]));
        }
        Command::Ablate { data } => {
            let cfg = load_config(cli)?;
            let fx = default_extractor()?;
            let outcome = cmd_ablate(&cfg, data, out_dir(cli)?, &fx)?;
            print!("{}", he2ihc::commands::markdown_table(&outcome.reports));
        }
        Command::Report { inputs } => {
            let reports = cmd_report(inputs, out_dir(cli)?)?;
            print!("{}", he2ihc::commands::markdown_table(&reports));
        }
    }
    Ok(())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
