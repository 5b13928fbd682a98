fn main() {
    std::process::exit(pso_forge::cli::run(std::env::args_os()));
}
