use clap::Parser;
use flowmarch_cli::{commands, exit_code, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = commands::run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
