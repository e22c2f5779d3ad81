use clap::Parser;
use trend_core::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
