fn main() {
    std::process::exit(rgflow_core::cli::run(std::env::args_os()));
}
