fn main() {
    std::process::exit(magskin::cli::main_with_args(std::env::args_os()));
}
