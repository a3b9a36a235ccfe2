fn main() {
    std::process::exit(pal_cli::run(std::env::args_os()));
}
