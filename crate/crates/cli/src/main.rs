fn main() {
    std::process::exit(fincast_cli::run(std::env::args_os()));
}
