fn main() {
    std::process::exit(nametune::cli::run_from_args(std::env::args_os()));
}
