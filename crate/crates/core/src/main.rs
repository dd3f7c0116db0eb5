fn main() {
    std::process::exit(agerestore::cli::run_command(std::env::args().collect()));
}
