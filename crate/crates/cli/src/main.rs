use std::path::PathBuf;
use std::process::ExitCode;

use bayes_ssl::config::{Method, RunConfig};
use bayes_ssl::pipeline;
use bayes_ssl::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bayes-ssl", version, about = "Bayesian BYOL pretraining, fine-tuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file; the built-in toy config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample encoder snapshots and write one ensemble per seed.
    Pretrain(Common),
    /// Fine-tune every snapshot at each label fraction.
    Finetune(Common),
    /// Accuracy and NLL for single-snapshot and averaged predictions.
    Eval(Common),
    /// Entropy histograms and AUROC against the OOD split.
    Ood(Common),
    /// Pretrain, fine-tune, eval and ood in sequence.
    Run(Common),
    /// Sampler moments on a Gaussian target with known variance.
    SampleDiag(Common),
    /// Print a complete config file.
    ShowConfig {
        /// Preset: byol, snap_byol, bbyol or ensemble_byol.
        #[arg(long, default_value = "bbyol")]
        method: String,
    },
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seeds) = &common.seed {
        cfg.seeds = seeds.clone();
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.validate()?;
    Ok((cfg, out))
}

fn print_report(title: &str, report: &bayes_ssl::metrics::EvalReport) {
    println!("{title}");
    print!("{}", report.to_tsv());
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(c) => {
            let (cfg, out) = resolve(&c)?;
            pipeline::cmd_pretrain(&cfg, &out)?;
            println!("wrote {} ensembles under {}", cfg.seeds.len(), out.display());
        }
        Command::Finetune(c) => {
            let (cfg, out) = resolve(&c)?;
            pipeline::cmd_finetune(&cfg, &out)?;
            println!("fine-tuned members written under {}", out.display());
        }
        Command::Eval(c) => {
            let (cfg, out) = resolve(&c)?;
            print_report("eval.tsv", &pipeline::cmd_eval(&cfg, &out)?);
        }
        Command::Ood(c) => {
            let (cfg, out) = resolve(&c)?;
            print_report("ood.tsv", &pipeline::cmd_ood(&cfg, &out)?);
        }
        Command::Run(c) => {
            let (cfg, out) = resolve(&c)?;
            pipeline::cmd_pretrain(&cfg, &out)?;
            pipeline::cmd_finetune(&cfg, &out)?;
            print_report("eval.tsv", &pipeline::cmd_eval(&cfg, &out)?);
            print_report("ood.tsv", &pipeline::cmd_ood(&cfg, &out)?);
        }
        Command::SampleDiag(c) => {
            let (cfg, out) = resolve(&c)?;
            print!("{}", pipeline::cmd_sample_diag(&cfg, &out)?);
        }
        Command::ShowConfig { method } => {
            let m = Method::parse(&method).ok_or_else(|| Error::Config(format!("unknown method {method:?}")))?;
            print!("{}", m.apply(&RunConfig::default()).to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
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
