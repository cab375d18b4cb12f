use std::process::ExitCode;

fn main() -> ExitCode {
    nebula_cli::run(std::env::args_os())
}
