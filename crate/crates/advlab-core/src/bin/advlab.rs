fn main() -> std::process::ExitCode {
    advlab_core::cli::main()
}
