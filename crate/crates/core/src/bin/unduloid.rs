fn main() {
    std::process::exit(unduloid_core::cli::main_with_args(std::env::args_os()));
}
