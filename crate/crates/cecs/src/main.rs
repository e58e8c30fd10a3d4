fn main() {
    std::process::exit(cecs::cli::run());
}
