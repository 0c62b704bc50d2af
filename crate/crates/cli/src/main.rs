fn main() {
    std::process::exit(megcast_cli::run(std::env::args_os()));
}
