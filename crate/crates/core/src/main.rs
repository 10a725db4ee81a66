fn main() {
    std::process::exit(revflow::cli::run(std::env::args_os()));
}
