fn main() {
    std::process::exit(matchkit::cli::run(std::env::args_os()));
}
