use clap::Parser;

fn main() {
    let cli = icx::cli::Cli::parse();
    if let Err(e) = icx::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
