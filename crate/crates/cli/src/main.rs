fn main() {
    std::process::exit(bsm_cli::run(std::env::args_os()));
}
