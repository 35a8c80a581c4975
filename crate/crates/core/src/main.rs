fn main() {
    std::process::exit(stiffnode::cli::run(std::env::args_os()));
}
