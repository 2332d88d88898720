use clap::Parser;
use covsamp::cli;

fn main() {
    let args = cli::Cli::parse();
    std::process::exit(cli::run(args));
}
