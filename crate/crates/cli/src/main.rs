use clap::Parser;

use icr_cli::cli::Cli;
use icr_cli::commands;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    // Usage errors print to stderr and exit with status 2 (clap's default).
    let cli = Cli::parse();
    if let Err(err) = commands::init_threads().and_then(|()| commands::run(cli)) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
