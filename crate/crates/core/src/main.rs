fn main() {
    std::process::exit(splitavg::cli::run(std::env::args_os()));
}
