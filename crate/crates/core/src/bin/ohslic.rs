use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OHSLIC_LOG", "warn")).init();
    let cli = ohslic::cli::Cli::parse();
    if let Err(e) = ohslic::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(ohslic::cli::exit_code(&e));
    }
}
