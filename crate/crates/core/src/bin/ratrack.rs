fn main() {
    std::process::exit(ratrack::cli::run(std::env::args_os()));
}
