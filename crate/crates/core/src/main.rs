fn main() {
    std::process::exit(sammese::cli::run_from(std::env::args_os()));
}
