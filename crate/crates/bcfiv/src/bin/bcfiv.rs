use bcfiv::cli::{run, RunConfig};
use clap::error::ErrorKind;
use clap::Parser;

fn main() {
    let cfg = match RunConfig::try_parse() {
        Ok(cfg) => cfg,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{}", e);
            std::process::exit(0);
        }
        Err(e) => {
            // bad flags are user errors: exit 1, diagnostics on stderr
            eprint!("{}", e);
            std::process::exit(1);
        }
    };
    std::process::exit(run(cfg));
}
