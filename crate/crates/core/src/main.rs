fn main() {
    std::process::exit(opilex::cli::run(std::env::args_os()));
}
