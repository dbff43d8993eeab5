fn main() {
    std::process::exit(simarena::cli::run_cli(std::env::args_os()));
}
