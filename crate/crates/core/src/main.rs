fn main() {
    std::process::exit(mmices::cli::run(std::env::args_os()));
}
