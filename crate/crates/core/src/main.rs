use clap::Parser;

use sae_gpg::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = cli::run(&cli.command) {
        let report = cli::error_report(&e);
        if let Some(out) = &cli.command.common().out {
            if out.is_dir() {
                let _ = std::fs::write(out.join("error.json"), format!("{report:#}\n"));
            }
        }
        eprintln!("error: {e}");
        eprintln!("{report}");
        std::process::exit(cli::exit_code(&e));
    }
}
