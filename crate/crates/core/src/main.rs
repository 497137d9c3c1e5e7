fn main() {
    std::process::exit(uaseg::cli::run(std::env::args_os()));
}
