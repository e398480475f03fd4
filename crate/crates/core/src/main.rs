fn main() {
    std::process::exit(revar::cli::run_from_args(std::env::args_os()));
}
