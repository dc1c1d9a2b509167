use clap::Parser;

fn main() {
    let cli = kdp_cli::Cli::parse();
    if let Err(e) = kdp_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
