fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SALN_LOG", "error")).init();
    std::process::exit(structalign::cli::run_from_args(std::env::args_os()));
}
