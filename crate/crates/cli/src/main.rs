fn main() {
    std::process::exit(agglomerator_cli::run(std::env::args_os()));
}
