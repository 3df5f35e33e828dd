use clap::Parser;

fn main() {
    let cli = latent_cli::Cli::parse();
    match latent_cli::run(cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
