use clap::Parser;

fn main() {
    let cli = ctrlbandit::cli::Cli::parse();
    if let Err(e) = ctrlbandit::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
