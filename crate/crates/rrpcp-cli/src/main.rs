fn main() {
    std::process::exit(rrpcp_cli::main_with(std::env::args_os()));
}
