fn main() {
    std::process::exit(vton::cli::run_command(std::env::args_os()));
}
