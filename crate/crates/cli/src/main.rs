use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = itervm_cli::Cli::parse();
    match itervm_cli::run(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
