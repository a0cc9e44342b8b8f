fn main() {
    std::process::exit(tubefield::cli::run(std::env::args_os()));
}
