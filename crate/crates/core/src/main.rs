fn main() {
    std::process::exit(ciss::cli::run());
}
