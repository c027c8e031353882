use clap::Parser;
use steproute::cli::{execute, Cli};

fn main() {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    if let Err(e) = execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
