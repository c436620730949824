fn main() {
    std::process::exit(eyeseg::cli::main_with_args(std::env::args_os()));
}
