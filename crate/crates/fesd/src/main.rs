use clap::Parser;
use fesd::{run, RunConfig};

fn main() {
    let config = match RunConfig::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(&config) {
        eprintln!("fesd: {}", e);
        std::process::exit(e.exit_code());
    }
}
