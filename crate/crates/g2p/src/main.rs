use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use g2p::config::{describe_schedule, RunConfig};
use g2p::pipeline;
use g2p::{Error, Method, Result};
use g2p_core::heads::HeadArch;

/// Polyphone disambiguation pipeline.
#[derive(Debug, Parser)]
#[command(name = "g2p", version)]
struct Cli {
    /// Config file (sectioned TOML); layered over the preset.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Base preset when the config file names none.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Override a config key, e.g. `--set pretrain.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set paths.out_dir=...`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Shorthand for `--set seed=...`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic marker corpus and its companion files.
    GenSynth,
    /// Pretrain the encoder with MLM and NSP.
    Pretrain,
    /// Train one classifier head on the frozen encoder (fold rotation 0).
    TrainHead {
        #[arg(long, value_parser = ["fc", "lstm", "transformer"])]
        arch: String,
    },
    /// Train the shared-output LSTM baseline (fold rotation 0).
    TrainBaseline,
    /// Read sentences from stdin, print one pronunciation per character.
    Predict {
        /// baseline, fc, lstm or transformer.
        #[arg(long)]
        method: String,
    },
    /// Cross-validate the configured methods.
    Eval {
        /// all, or a comma list of baseline, fc, lstm, transformer.
        #[arg(long)]
        method: Option<String>,
    },
    /// Export the cropped attention map of the trained transformer head.
    Attention,
    /// Export a 2-D PCA of encoder features for one character.
    Pca,
    /// Print the resolved config.
    Config,
}

fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("paths.out_dir={}", quote(&out.display().to_string())));
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.command {
        Command::Predict { method } => overrides.push(format!("method={}", quote(method))),
        Command::Eval { method: Some(m) } => overrides.push(format!("method={}", quote(m))),
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.preset, &overrides)?;

    match cli.command {
        Command::GenSynth => {
            pipeline::gen_synth(&cfg)?;
            eprintln!("wrote synthetic corpus to {}", cfg.out_dir().display());
        }
        Command::Pretrain => {
            let (_, report) = pipeline::pretrain(&cfg)?;
            let (first, last) = (report.initial(), report.last());
            eprintln!(
                "mlm loss {:.4} -> {:.4}, nsp accuracy {:.4} -> {:.4}",
                first.mlm_loss, last.mlm_loss, first.nsp_accuracy, last.nsp_accuracy
            );
        }
        Command::TrainHead { arch } => {
            let arch = HeadArch::parse(&arch).ok_or_else(|| Error::Usage(format!("unknown arch {arch}")))?;
            let schedule = describe_schedule(&cfg.head_train_config(arch, 0).adam);
            let (_, t) = pipeline::train_head(&cfg, arch)?;
            eprintln!(
                "{} ({schedule}): best dev {:.4} at epoch {}, test {:.4}",
                Method::Head(arch).name(),
                t.report.best_dev_accuracy,
                t.report.best_epoch,
                t.test_accuracy
            );
        }
        Command::TrainBaseline => {
            let (_, t) = pipeline::train_baseline(&cfg)?;
            eprintln!(
                "baseline: best dev {:.4} at epoch {}, test {:.4}",
                t.report.best_dev_accuracy, t.report.best_epoch, t.test_accuracy
            );
        }
        Command::Predict { .. } => {
            let mut input = String::new();
            std::io::stdin()
                .read_to_string(&mut input)
                .map_err(|e| Error::io("<stdin>", e))?;
            print!("{}", pipeline::predict(&cfg, &input)?);
        }
        Command::Eval { .. } => {
            let (_, e) = pipeline::eval_with_progress(&cfg, |m| eprintln!("{m}"))?;
            for r in &e.reports {
                println!("{}\t{:.4}\t{:.4}", r.method, r.mean(), r.stddev());
            }
            if let Some(l) = e.locality {
                println!("attention locality\t{l:.4}");
            }
        }
        Command::Attention => {
            let (_, map, locality) = pipeline::attention(&cfg)?;
            eprintln!("{} instances, locality {locality:.4}", map.instances);
        }
        Command::Pca => {
            let (_, p) = pipeline::pca(&cfg)?;
            eprintln!("explained variance {:.4} {:.4}", p.explained[0], p.explained[1]);
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
