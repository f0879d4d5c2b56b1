fn main() -> std::process::ExitCode {
    crossview::cli::main_with_args(std::env::args_os())
}
