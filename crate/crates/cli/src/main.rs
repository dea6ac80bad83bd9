use std::process::ExitCode;

use advpose_cli::{run, Cli};
use advpose_core::experiment::ExperimentError;
use clap::Parser;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli).map_err(anyhow::Error::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<ExperimentError>().map_or(1, |x| x.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
