use clap::Parser;
use spinloc_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(f) = run(&cli.command) {
        eprintln!("error: {f}");
        std::process::exit(f.code);
    }
}
