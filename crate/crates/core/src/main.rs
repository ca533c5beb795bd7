fn main() {
    std::process::exit(grafuse::cli::run(std::env::args_os()));
}
