fn main() {
    std::process::exit(sfa_cli::run(std::env::args_os()));
}
