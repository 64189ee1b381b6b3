fn main() {
    std::process::exit(comer::cli::main_with(std::env::args()));
}
