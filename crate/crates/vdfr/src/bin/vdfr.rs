use clap::Parser;
use vdfr::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        if cli.json {
            println!(
                "{}",
                serde_json::json!({ "error": err.to_string() })
            );
        }
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
