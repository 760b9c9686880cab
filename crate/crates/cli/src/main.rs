//! Command-line front end: data generation, training, inference, evaluation.

mod commands;
mod failure;
mod keys;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use failure::{Failure, Fallible, USAGE};
use keys::Settings;

#[derive(Parser)]
#[command(name = "panohdr", version, about = "Learned inverse tonemapping of outdoor LDR panoramas")]
struct Cli {
    /// Caps worker threads for every parallel stage.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one config key; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a synthetic dataset and its manifest.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Trains a model from scratch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Transport cache, built there when missing or stale.
        #[arg(long, value_name = "FILE")]
        transport: Option<PathBuf>,
    },
    /// Continues training a checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        init: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "FILE")]
        transport: Option<PathBuf>,
    },
    /// Trains with adversarial domain adaptation to unlabelled panoramas.
    TrainDa {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Unlabelled LDR panoramas: a dataset directory or a folder of PPM files.
        #[arg(long, value_name = "DIR")]
        real: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "FILE")]
        init: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        transport: Option<PathBuf>,
    },
    /// Predicts HDR from one LDR panorama, or from a dataset split.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// LDR PPM; the prediction is written to `--out` as PFM.
        #[arg(long, value_name = "FILE", conflicts_with = "data", required_unless_present = "data")]
        input: Option<PathBuf>,
        /// Dataset directory; predictions go to the `--out` directory.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Writes per-sample metrics and their summary.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset or prediction directory holding the ground truth.
        #[arg(long, value_name = "DIR")]
        truth: PathBuf,
        /// Prediction directory to score.
        #[arg(long, value_name = "DIR", conflicts_with = "model", required_unless_present = "model")]
        pred: Option<PathBuf>,
        /// Checkpoint scored on `eval.split` of the truth dataset.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "FILE")]
        transport: Option<PathBuf>,
    },
    /// Renders the transport scene lit by an HDR panorama to PNG.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        pano: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also writes the linear render as PFM.
        #[arg(long, value_name = "FILE")]
        raw: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        transport: Option<PathBuf>,
    },
    /// Prints prediction ids ranked by closeness to a target illumination.
    Match {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Prediction directory written by `infer --data`.
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
    },
    /// Checks every autodiff op against finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Builds and caches the transport matrix.
    BuildTransport {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

const COMMANDS: [&str; 10] =
    ["gen", "train", "finetune", "train-da", "infer", "eval", "render", "match", "gradcheck", "build-transport"];

fn command_with_key_help() -> clap::Command {
    let mut cmd = Cli::command();
    for name in COMMANDS {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys::help_text(name)));
    }
    cmd
}

fn settings(name: &str, cfg: &ConfigArgs) -> Fallible<Settings> {
    Settings::load(name, cfg.config.as_deref(), &cfg.overrides)
}

fn run(cli: Cli) -> Fallible<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(Failure::usage)?;
    }
    match &cli.command {
        Command::Gen { cfg, out } => commands::gen(&settings("gen", cfg)?, out),
        Command::Train { cfg, data, out, transport } => commands::train(&settings("train", cfg)?, data, out, transport.as_deref()),
        Command::Finetune { cfg, data, init, out, transport } => {
            commands::finetune(&settings("finetune", cfg)?, data, init, out, transport.as_deref())
        }
        Command::TrainDa { cfg, data, real, out, init, transport } => {
            commands::train_da(&settings("train-da", cfg)?, data, real, out, init.as_deref(), transport.as_deref())
        }
        Command::Infer { cfg, model, input, data, out } => {
            let s = settings("infer", cfg)?;
            match (input, data) {
                (Some(input), _) => commands::infer_one(&s, model, input, out),
                (None, Some(data)) => commands::infer_dataset(&s, model, data, out),
                (None, None) => Err(Failure::usage(anyhow::anyhow!("infer needs --input or --data"))),
            }
        }
        Command::Eval { cfg, truth, pred, model, out, transport } => {
            let s = settings("eval", cfg)?;
            match (pred, model) {
                (Some(pred), _) => commands::eval_dirs(&s, pred, truth, out, transport.as_deref()),
                (None, Some(model)) => commands::eval_model(&s, model, truth, out, transport.as_deref()),
                (None, None) => Err(Failure::usage(anyhow::anyhow!("eval needs --pred or --model"))),
            }
        }
        Command::Render { cfg, pano, out, raw, transport } => {
            commands::render(&settings("render", cfg)?, pano, out, raw.as_deref(), transport.as_deref())
        }
        Command::Match { cfg, pred } => {
            for id in commands::match_ids(&settings("match", cfg)?, pred)? {
                println!("{id}");
            }
            Ok(())
        }
        Command::Gradcheck { cfg } => commands::gradcheck(&settings("gradcheck", cfg)?),
        Command::BuildTransport { cfg, out } => commands::build_transport_cache(&settings("build-transport", cfg)?, out),
    }
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn main() -> ExitCode {
    let matches = match command_with_key_help().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(USAGE as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code as u8)
        }
    }
}
