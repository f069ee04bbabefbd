use clap::Parser;
use posm_cli::args::Cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = posm_cli::configure_threads().and_then(|()| posm_cli::commands::dispatch(&cli.command));
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(posm_cli::exit_code(&err));
    }
}
