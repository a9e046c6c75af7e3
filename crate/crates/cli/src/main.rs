mod args;
mod commands;

use std::process::ExitCode;

use mfr_core::{Error, Result};

fn run() -> Result<()> {
    let matches = args::command().get_matches();
    if let Some(&workers) = matches.get_one::<u16>("workers") {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers.into())
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    }
    match matches.subcommand() {
        Some(("gen", m)) => commands::gen(m),
        Some(("train", m)) => commands::train(m),
        Some(("eval", m)) => commands::eval(m),
        Some(("match", m)) => commands::match_features(m),
        Some(("report", m)) => commands::report(m),
        _ => unreachable!("clap requires a subcommand"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
