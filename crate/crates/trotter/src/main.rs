fn main() {
    std::process::exit(trotter::cli::run_with_args(std::env::args_os()));
}
