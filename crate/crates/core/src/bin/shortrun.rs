fn main() {
    std::process::exit(shortrun::cli::run(std::env::args_os()));
}
