fn main() {
    std::process::exit(trelm::cli::run(std::env::args_os()));
}
