use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(pvit_cli::run(std::env::args_os()))
}
