fn main() {
    std::process::exit(dlf::cli::run(std::env::args_os()));
}
