use clap::Parser;

fn main() {
    let cli = cut_cli::Cli::parse();
    if let Err(e) = cut_cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
