use std::process::ExitCode;

fn main() -> ExitCode {
    jodie::cli::main_with_args(std::env::args_os())
}
