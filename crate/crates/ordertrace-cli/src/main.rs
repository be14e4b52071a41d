use clap::Parser;

fn main() {
    let cli = ordertrace_cli::Cli::parse();
    if let Err(e) = ordertrace_cli::run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
