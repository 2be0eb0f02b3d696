fn main() {
    std::process::exit(ccloss::cli::run(std::env::args_os()));
}
