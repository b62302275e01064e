fn main() {
    std::process::exit(pyrabox::cli::run(std::env::args_os()));
}
