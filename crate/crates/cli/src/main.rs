fn main() {
    std::process::exit(bamrl_cli::run());
}
