fn main() {
    std::process::exit(plantdx::cli::main_with_args(std::env::args_os()));
}
