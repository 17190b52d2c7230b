use clap::Parser;

fn main() {
    let cli = cis_cli::Cli::parse();
    if let Err(err) = cis_cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
