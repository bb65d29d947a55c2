fn main() {
    std::process::exit(clin::cli::run(std::env::args_os()));
}
