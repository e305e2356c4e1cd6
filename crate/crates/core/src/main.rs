use std::io::Write;

fn init_logging() {
    let level = match std::env::var("KD_TOOLKIT_LOG").ok().as_deref() {
        Some("quiet") => log::LevelFilter::Error,
        Some("info") => log::LevelFilter::Info,
        Some("debug") => log::LevelFilter::Debug,
        Some(other) => {
            eprintln!("KD_TOOLKIT_LOG: unknown level '{other}', using warn");
            log::LevelFilter::Warn
        }
        None => log::LevelFilter::Warn,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() {
    init_logging();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let code = kd_toolkit::cli::run_from_args(std::env::args_os(), &mut out);
    let _ = out.flush();
    std::process::exit(code);
}
