fn main() {
    std::process::exit(biattn::cli::main_with_args(std::env::args_os()));
}
