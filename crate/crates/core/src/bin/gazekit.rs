fn main() {
    std::process::exit(gazekit::cli::run(std::env::args_os()));
}
