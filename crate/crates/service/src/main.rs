fn main() {
    ehgan_service::cli::init_logging();
    std::process::exit(ehgan_service::cli::run_from(std::env::args_os()));
}
