fn main() {
    std::process::exit(dan_core::cli::run(std::env::args_os()));
}
