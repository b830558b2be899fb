use std::collections::BTreeMap;
use std::process::ExitCode;

use remote_build::cli;

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let env: BTreeMap<String, String> = std::env::vars().collect();
    let code = cli::execute(&argv, &env, None).await;
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}
