fn main() {
    std::process::exit(magnograph::cli::run());
}
