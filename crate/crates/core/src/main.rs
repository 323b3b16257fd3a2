fn main() {
    std::process::exit(metassl::cli::run(std::env::args_os()));
}
