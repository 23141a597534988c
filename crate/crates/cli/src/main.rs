use clap::Parser;

use boxmr_cli::app::{execute, init_logging, Cli};

fn main() {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    std::process::exit(execute(cli));
}
