use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use cstk_cli::{run, Cli};

fn main() -> ExitCode {
    // clap reports usage errors itself, with exit status 2.
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = run(cli, &mut out);
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
