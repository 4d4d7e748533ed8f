use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ignn::cli::main_with_args(std::env::args()) as u8)
}
