use std::process::ExitCode;

fn main() -> ExitCode {
    madview::runtime::tune_allocator();
    madview::cli::run(std::env::args_os())
}
