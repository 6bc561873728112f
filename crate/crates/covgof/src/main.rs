use clap::Parser;
use covgof::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
