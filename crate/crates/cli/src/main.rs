fn main() {
    std::process::exit(hemopinn_cli::run(std::env::args_os()));
}
