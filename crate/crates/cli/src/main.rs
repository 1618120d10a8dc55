use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsimclr::config::RunConfig;
use gsimclr::pipeline::{self, Context, StageOutcome};
use gsimclr::scheduler::PlanMode;
use gsimclr::Error;

#[derive(Parser)]
#[command(name = "gsimclr", version, about = "Pseudo-label guided contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoising autoencoder and export latents.
    TrainDae(StageArgs),
    /// Cluster the latents into pseudo-labels.
    Cluster(StageArgs),
    /// Build per-epoch batch plans.
    Plan(StageArgs),
    /// Train encoder and projection head with NT-Xent.
    TrainContrastive(StageArgs),
    /// Linear probes at the configured tap points.
    Probe(StageArgs),
    /// Fine-tune on a labelled fraction of the training split.
    Finetune(StageArgs),
    /// Run every stage for the selected mode.
    Pipeline(StageArgs),
    /// Summarize results.jsonl into a comparison table.
    Report {
        #[arg(long, default_value = "runs/default")]
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    /// INI config. Without it the shared settings come from
    /// <run-dir>/config.ini when present; seed and mode then come from the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs/default")]
    run_dir: PathBuf,
    /// guided or random
    #[arg(long)]
    mode: Option<PlanMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rerun even when outputs are up to date.
    #[arg(long)]
    force: bool,
}

impl StageArgs {
    fn context(&self) -> gsimclr::Result<Context> {
        let fallback = self.run_dir.join("config.ini");
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if fallback.exists() => {
                let mut c = RunConfig::load(&fallback)?;
                let d = RunConfig::default();
                c.seed = d.seed;
                c.scheduler.mode = d.scheduler.mode;
                c
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(m) = self.mode {
            config.scheduler.mode = m;
        }
        Ok(Context::new(config, self.run_dir.clone(), self.force))
    }
}

fn outcome(stage: &str, o: StageOutcome) {
    match o {
        StageOutcome::Ran => println!("{stage}: done"),
        StageOutcome::UpToDate => println!("{stage}: up to date"),
    }
}

fn run(cli: Cli) -> gsimclr::Result<()> {
    match cli.command {
        Command::TrainDae(a) => outcome("train-dae", pipeline::train_dae(&a.context()?)?),
        Command::Cluster(a) => outcome("cluster", pipeline::cluster(&a.context()?)?),
        Command::Plan(a) => {
            let (o, warnings) = pipeline::plan(&a.context()?)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            outcome("plan", o);
        }
        Command::TrainContrastive(a) => outcome("train-contrastive", pipeline::train_contrastive(&a.context()?)?),
        Command::Probe(a) => outcome("probe", pipeline::probe(&a.context()?)?),
        Command::Finetune(a) => outcome("finetune", pipeline::finetune(&a.context()?)?),
        Command::Pipeline(a) => {
            for w in pipeline::run_pipeline(&a.context()?)? {
                eprintln!("warning: {w}");
            }
            println!("pipeline: done");
        }
        Command::Report { run_dir } => {
            let r = pipeline::report(&run_dir)?;
            print!("{}", r.table);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::MissingArtifact { .. } | Error::Incompatible(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
