use clap::Parser;

fn main() {
    let cli = specdiff::cli::Cli::parse();
    if let Err(e) = specdiff::cli::run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
