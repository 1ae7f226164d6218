fn main() {
    std::process::exit(netlearn::cli::main_with(std::env::args_os()));
}
