fn main() {
    std::process::exit(cellhealth::cli::run(std::env::args_os()));
}
