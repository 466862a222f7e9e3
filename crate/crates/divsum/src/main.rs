fn main() {
    std::process::exit(divsum::cli::run());
}
