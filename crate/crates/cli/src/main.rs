fn main() {
    std::process::exit(mgca_cli::main_with_args(std::env::args_os()));
}
