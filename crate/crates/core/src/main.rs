use clap::Parser;
use protofuse::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
        eprintln!("{line}");
        std::process::exit(1);
    }
}
