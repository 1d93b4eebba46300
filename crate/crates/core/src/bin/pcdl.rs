fn main() {
    std::process::exit(pcdl::cli::run_command(std::env::args_os()));
}
