use std::process::ExitCode;

fn main() -> ExitCode {
    streamsim::cli::main_with(std::env::args_os())
}
