fn main() {
    std::process::exit(vgskit::cli::run(std::env::args_os()));
}
