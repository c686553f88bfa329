use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = tap_cli::Cli::parse();
    if let Err(e) = tap_cli::run(cli) {
        log::error!("{e}");
        std::process::exit(tap_cli::exit_code(&e));
    }
}
