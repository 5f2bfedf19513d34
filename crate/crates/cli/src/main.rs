use clap::Parser;

fn main() {
    let cli = rbo_cli::Cli::parse();
    if let Err(e) = rbo_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code.code());
    }
}
