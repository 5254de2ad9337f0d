use std::process::ExitCode;

fn main() -> ExitCode {
    tinywing::cli::run()
}
