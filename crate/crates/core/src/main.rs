use clap::Parser;

fn main() {
    let cli = alc_core::cli::Cli::parse();
    std::process::exit(alc_core::cli::run(cli));
}
