fn main() -> std::process::ExitCode {
    piml_rul::cli::main()
}
