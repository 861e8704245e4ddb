fn main() {
    std::process::exit(conic_tomo::cli::main_with(std::env::args_os()));
}
