use clap::Parser;
use nlqmm_cli::commands::{execute, thread_count, Cli};
use nlqmm_cli::EXIT_INPUT;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match thread_count(cli.threads) {
        Ok(threads) => {
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not configure {n} threads: {e}");
                }
            }
            match execute(&cli) {
                Ok(code) => code,
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    };
    std::process::exit(code);
}
