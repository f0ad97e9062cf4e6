use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(labelnoise_cli::cli_main(std::env::args()) as u8)
}
