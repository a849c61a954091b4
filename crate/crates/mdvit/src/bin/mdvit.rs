fn main() {
    std::process::exit(mdvit::cli::run(std::env::args_os()));
}
