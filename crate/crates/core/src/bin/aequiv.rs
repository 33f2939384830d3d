fn main() {
    std::process::exit(aequiv::cli::run(std::env::args_os()));
}
