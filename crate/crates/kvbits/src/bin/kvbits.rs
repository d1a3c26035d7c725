use clap::Parser;

fn main() {
    let cli = kvbits::cli::Cli::parse();
    match kvbits::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
