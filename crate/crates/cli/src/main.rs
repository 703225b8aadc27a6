use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(gcrf_cli::run(std::env::args_os()))
}
