fn main() {
    std::process::exit(polyprune::cli::run(std::env::args_os()));
}
