fn main() {
    std::process::exit(xdiff_cli::run(std::env::args_os()));
}
