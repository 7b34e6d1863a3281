use clap::Parser;
use rimfg::cli::{execute, report, Cli};

fn main() {
    let mut cli = Cli::parse();
    if let Err(e) = cli.global.apply_env() {
        eprintln!("error: config: {}: {e}", e.kind());
        std::process::exit(2);
    }
    let outcome = execute(&cli);
    report(&outcome);
    std::process::exit(outcome.exit_code());
}
