fn main() {
    std::process::exit(specalloc_cli::run(std::env::args_os()));
}
