fn main() {
    std::process::exit(hire::cli::run(std::env::args_os()));
}
