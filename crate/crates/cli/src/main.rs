fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("C3CA_LOG", "info")).init();
    std::process::exit(coca3d_cli::run(std::env::args_os()));
}
