fn main() {
    std::process::exit(tfda::cli::run_cli(std::env::args_os()));
}
