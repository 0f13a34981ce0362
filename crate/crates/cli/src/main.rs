use clap::Parser;
use r2map_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(f) = run(&cli) {
        eprintln!("error: {:#}", f.error());
        std::process::exit(f.exit_code());
    }
}
