fn main() {
    std::process::exit(bihalf::cli::main_with_args(std::env::args_os()));
}
