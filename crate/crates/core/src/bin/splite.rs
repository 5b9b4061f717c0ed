use clap::Parser;
use splite::commands::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let result = run(cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(exit_code(&result));
}
