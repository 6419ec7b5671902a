use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

mod args;
mod commands;

use args::{BaselineCommand, Cli, Command};

fn resolve_threads(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("PASTA_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn run(cli: &Cli) -> commands::Result<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Fit(a) => commands::fit(a),
        Command::DefineAnomalies(a) => commands::define_anomalies(a),
        Command::InferPatch(a) => commands::infer(a, false),
        Command::InferFused(a) => commands::infer(a, true),
        Command::Baseline(BaselineCommand::Fit(a)) => commands::baseline_fit(a),
        Command::Baseline(BaselineCommand::Infer(a)) => commands::baseline_infer(a),
        Command::Baseline(BaselineCommand::Sweep(a)) => commands::baseline_sweep(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Hist(a) => commands::hist(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    if let Some(n) = resolve_threads(cli.threads) {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
