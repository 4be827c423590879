use clap::Parser;
use dpie::cli::{run, Cli};

fn main() {
    // clap exits with 2 on malformed arguments and 0 for --help
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
