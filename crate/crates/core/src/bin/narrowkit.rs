fn main() {
    std::process::exit(narrowkit::cli::main_with_args(std::env::args_os()));
}
