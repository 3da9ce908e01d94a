use clap::Parser;

fn main() {
    let cli = pvcell_cli::Cli::parse();
    if let Err(e) = pvcell_cli::run(cli) {
        eprintln!("pvcell: {e}");
        std::process::exit(e.exit_code());
    }
}
