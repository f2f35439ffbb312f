fn main() {
    std::process::exit(acfr_cli::main_with_args(std::env::args_os()));
}
