fn main() {
    std::process::exit(chatplan::cli::main_with_args(std::env::args_os()));
}
