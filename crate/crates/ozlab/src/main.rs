fn main() {
    std::process::exit(ozlab::cli::main_with(std::env::args()));
}
