fn main() {
    std::process::exit(s2dtan::cli::run(std::env::args_os()));
}
