use clap::Parser;
use lorentz_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(outputs) => {
            for p in outputs {
                println!("{}", p.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
