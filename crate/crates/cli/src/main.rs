fn main() {
    std::process::exit(quadsci_cli::run(std::env::args_os()));
}
