fn main() {
    std::process::exit(bfd::cli::run(std::env::args_os()));
}
