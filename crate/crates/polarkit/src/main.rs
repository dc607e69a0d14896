use clap::Parser;

fn main() {
    let cli = polarkit::cli::Cli::parse();
    std::process::exit(polarkit::cli::run(cli));
}
