fn main() {
    std::process::exit(wigmatch::harness::cli::run(std::env::args_os()));
}
