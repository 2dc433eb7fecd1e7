use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("GRAPHFI_LOG_LEVEL", "error"))
        .format_timestamp(None)
        .init();
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr().lock();
    let code = graphfi_core::cli::run(std::env::args_os(), &mut stdout, &mut stderr);
    std::process::exit(code);
}
