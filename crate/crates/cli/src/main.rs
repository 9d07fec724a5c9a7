fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MSINET_LOG", "warn")).init();
    std::process::exit(msinet_cli::run(std::env::args_os()));
}
