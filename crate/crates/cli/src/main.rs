fn main() {
    std::process::exit(wmlab_cli::run(std::env::args_os()));
}
