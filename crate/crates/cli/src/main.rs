fn main() {
    std::process::exit(als_cli::main_with_args(std::env::args_os()));
}
