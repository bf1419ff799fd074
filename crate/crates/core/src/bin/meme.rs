fn main() -> std::process::ExitCode {
    meme_core::cli::main_with(std::env::args_os())
}
