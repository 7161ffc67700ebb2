fn main() {
    std::process::exit(gasa::cli::main_with_args(std::env::args_os()));
}
