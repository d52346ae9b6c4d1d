fn main() {
    std::process::exit(funcorr::cli::run_command(std::env::args_os()));
}
