fn main() {
    std::process::exit(capdiff::cli::run(std::env::args_os()));
}
