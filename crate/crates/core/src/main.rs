use clap::Parser;

use cmgp::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Cli::parse();
    if let Err(failure) = cli::run(args) {
        eprintln!("error: {failure}");
        std::process::exit(failure.code);
    }
}
