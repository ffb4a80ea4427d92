fn main() {
    std::process::exit(lsgd_core::cli::main_with_args(std::env::args_os()));
}
