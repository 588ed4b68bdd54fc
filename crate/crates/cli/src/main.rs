use clap::Parser;

fn main() {
    let cli = stackdid_cli::Cli::parse();
    std::process::exit(stackdid_cli::run(cli));
}
