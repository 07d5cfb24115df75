fn main() {
    std::process::exit(nnsd::cli::run(std::env::args_os()));
}
