fn main() {
    std::process::exit(vrga::cli::run(std::env::args_os()));
}
