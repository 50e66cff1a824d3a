fn main() {
    std::process::exit(harvest_cusum::cli::main_with_args(std::env::args_os()));
}
