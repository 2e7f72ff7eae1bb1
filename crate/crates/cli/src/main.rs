fn main() {
    std::process::exit(qope_cli::run_from_args(std::env::args_os()));
}
