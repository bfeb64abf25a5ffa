use clap::Parser;

use bnmf::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = cli::run(cli) {
        eprintln!("{}", cli::error_line(&err));
        std::process::exit(cli::exit_code(&err));
    }
}
