fn main() {
    std::process::exit(pcsep_cli::run());
}
