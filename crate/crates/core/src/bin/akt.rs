use clap::Parser;

fn main() {
    let cli = akt::cli::Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = akt::cli::run(&cli, &mut stdout.lock()) {
        eprintln!("akt: {e}");
        std::process::exit(1);
    }
}
