use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = ksdiff_cli::parse(std::env::args_os()).and_then(|parsed| match parsed {
        Ok(cli) => ksdiff_cli::run(cli),
        Err(text) => Ok(text),
    });
    match result {
        Ok(text) => {
            println!("{}", text.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_status())
        }
    }
}
