fn main() {
    std::process::exit(cbir::cli::run(std::env::args_os()));
}
