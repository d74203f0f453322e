fn main() {
    std::process::exit(metasched::cli::run(std::env::args_os()));
}
