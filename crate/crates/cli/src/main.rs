use clap::Parser;

fn main() {
    let args = invlens_cli::Args::parse();
    if let Err(e) = invlens_cli::run(&args) {
        eprintln!("invariant-lens: {e}");
        std::process::exit(e.exit_code());
    }
}
