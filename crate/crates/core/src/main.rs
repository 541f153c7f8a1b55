fn main() {
    std::process::exit(styleconv::cli::run_cli(std::env::args_os()));
}
