use clap::Parser;

fn main() {
    let cli = match ragcurate_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors.
            std::process::exit(if e.use_stderr() { ragcurate_cli::EXIT_USAGE } else { 0 });
        }
    };
    if let Err(e) = ragcurate_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
