fn main() {
    std::process::exit(ahn::cli::run(std::env::args_os()));
}
