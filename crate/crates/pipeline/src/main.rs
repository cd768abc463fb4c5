use clap::Parser;
use trialcensus_pipeline::cli::{init_logging, run, usage_error, Cli};

fn main() {
    let code = match Cli::try_parse() {
        Ok(cli) => {
            init_logging(cli.verbose);
            run(cli)
        }
        Err(e) => usage_error(e),
    };
    std::process::exit(code);
}
