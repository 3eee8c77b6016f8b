use std::process::ExitCode;

use clap::Parser;
use rvt_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rvt: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
