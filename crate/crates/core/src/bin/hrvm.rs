fn main() {
    std::process::exit(hrvm::cli::main_with_args(std::env::args_os()));
}
