fn main() {
    std::process::exit(odlsim::cli::main_with_args(std::env::args_os()));
}
