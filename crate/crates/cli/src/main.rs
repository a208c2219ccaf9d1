use clap::Parser;
use delay_lqr_cli::run::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DELAY_LQR_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.json);
            std::process::exit(outcome.exit_code);
        }
        Err(e) => {
            eprintln!("delay-lqr: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
