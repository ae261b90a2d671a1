use clap::Parser;

use physaug::cli::{error_line, exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("{}", error_line(&e));
        std::process::exit(exit_code(&e));
    }
}
