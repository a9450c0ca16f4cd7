use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use restorelab_cli::{commands, serve};
use restorelab_core::config::CONFIG_ENV_VAR;

#[derive(Parser)]
#[command(name = "restorelab", version, about = "Content-aware image restoration pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the restoration pipeline on an image or a directory of images.
    Run {
        #[arg(long, env = CONFIG_ENV_VAR)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        damage: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore the whole image with a single inpainting call.
    Direct {
        #[arg(long, env = CONFIG_ENV_VAR)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        damage: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply an edit script to a finished run and re-render.
    Edit {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        script: PathBuf,
    },
    /// Score restoration methods on a dataset.
    Eval {
        #[arg(long, env = CONFIG_ENV_VAR)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "pipeline,direct")]
        methods: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a run's manifest chain.
    Stages {
        #[arg(long)]
        run: PathBuf,
    },
    /// Serve the editor API for a finished run.
    Serve {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        port: u16,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, input, damage, out } => {
            let results = commands::run(&config, &input, damage.as_deref(), &out).context("pipeline run failed")?;
            for r in results {
                println!("{}", r.run.root.display());
            }
        }
        Command::Direct { config, input, damage, out } => {
            let r = commands::direct(&config, &input, &damage, &out).context("direct run failed")?;
            println!("{}", r.run.root.display());
        }
        Command::Edit { run, script } => {
            let m = commands::edit(&run, &script).context("edit failed")?;
            println!("{}", run.join(format!("{:02}_{}", m.stage_index, m.stage_name)).display());
        }
        Command::Eval { config, dataset, methods, out } => {
            let outcome = commands::eval(&config, &dataset, &methods, &out).context("evaluation failed")?;
            print!("{}", outcome.report.summary_text());
            for s in &outcome.skipped {
                eprintln!("skipped {s}: no ground-truth detection");
            }
        }
        Command::Stages { run } => print!("{}", commands::stages(&run)?),
        Command::Serve { run, port } => serve::serve(&run, port)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
