fn main() {
    std::process::exit(tavo_cli::run(std::env::args_os()));
}
