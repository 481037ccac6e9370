fn main() {
    std::process::exit(hashbound::cli::run(std::env::args_os()));
}
