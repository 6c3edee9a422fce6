use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = rmac_cli::run(std::env::args_os());
    match &result {
        Ok(outcome) if outcome.failures > 0 => {
            log::warn!(
                "{} inputs failed; see the manifest next to the output",
                outcome.failures
            )
        }
        Ok(_) => {}
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(ce) => {
                let _ = ce.print();
                return ExitCode::from(if ce.use_stderr() {
                    rmac_cli::EXIT_FATAL
                } else {
                    rmac_cli::EXIT_OK
                });
            }
            None => eprintln!("error: {}", rmac_cli::describe_error(e)),
        },
    }
    ExitCode::from(rmac_cli::exit_status(&result))
}
