use std::io::Write;
use std::process::ExitCode;

use gazegrid::cli::{run, RunError};

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(out) => {
            print!("{out}");
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(RunError::Usage(e)) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            ExitCode::from(code)
        }
        Err(RunError::Failed(e)) => {
            eprintln!("error: {}: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
