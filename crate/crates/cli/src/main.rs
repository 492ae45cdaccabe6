use clap::Parser;

fn main() {
    let cli = match gedi_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = gedi_cli::run(cli) {
        eprintln!("gedi: {e}");
        std::process::exit(e.exit_code());
    }
}
