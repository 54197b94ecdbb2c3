fn main() {
    std::process::exit(nubflow_cli::main_with_args(std::env::args_os()));
}
