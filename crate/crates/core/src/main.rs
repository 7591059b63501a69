use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = dapt::cli::run(std::env::args());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(dapt::cli::exit_code(&result) as u8)
}
