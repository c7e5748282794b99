use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIA_LOG", "warn")).init();
    std::process::exit(sia_cli::run(sia_cli::Cli::parse()));
}
