use clap::Parser;

fn main() {
    let cli = dropdisc_cli::Cli::parse();
    if let Err(e) = dropdisc_cli::run(cli, std::io::stdout().lock()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
