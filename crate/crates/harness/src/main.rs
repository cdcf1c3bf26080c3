use std::process::ExitCode;

use clap::Parser;
use mtm_harness::commands::{execute, Cli};
use mtm_harness::HarnessError;

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(m) => {
            println!("{} finished in {:.1}s", m.run_id, m.elapsed_secs);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                HarnessError::Config { .. } => 2,
                HarnessError::Missing { .. } => 3,
                _ => 1,
            })
        }
    }
}
