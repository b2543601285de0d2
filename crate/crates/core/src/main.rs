use clap::Parser;

fn main() {
    let cli = bnmatch::cli::Cli::parse();
    std::process::exit(bnmatch::cli::run(cli));
}
