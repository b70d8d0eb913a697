fn main() {
    std::process::exit(confidec::cli::run(std::env::args_os()));
}
