fn main() {
    std::process::exit(weakstrong::cli::run(std::env::args_os()));
}
