fn main() {
    std::process::exit(ukd::cli::run(std::env::args_os()));
}
