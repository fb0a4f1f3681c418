use std::process::ExitCode;

use clap::Parser;
use netsem::commands::{run, Cli};
use netsem::par;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let report = serde_json::json!({
                "error": "usage",
                "message": e.to_string().trim_end(),
                "exit_code": 2,
            });
            eprintln!("{report}");
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match par::with_jobs(cli.jobs, || run(&cli, &mut std::io::stdout().lock())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let report = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{report}");
            ExitCode::from(code as u8)
        }
    }
}
