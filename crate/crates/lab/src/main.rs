use clap::Parser;
use vsrdistill::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        println!("{}", e.machine_line());
        std::process::exit(e.code());
    }
}
