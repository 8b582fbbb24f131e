use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let outcome = linkforge::cli::dispatch(std::env::args_os());
    if !outcome.message.is_empty() {
        // a closed pipe downstream is not an error worth a panic
        let _ = if outcome.code == 0 {
            writeln!(std::io::stdout(), "{}", outcome.message)
        } else {
            writeln!(std::io::stderr(), "{}", outcome.message)
        };
    }
    ExitCode::from(outcome.code as u8)
}
