use std::process::ExitCode;

fn main() -> ExitCode {
    voxstack_cli::run()
}
