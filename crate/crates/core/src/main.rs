fn main() {
    std::process::exit(funweight::cli::run(std::env::args_os()));
}
