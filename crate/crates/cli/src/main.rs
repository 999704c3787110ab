//! `dsmprune`: detect and prune domain-specific-mechanism neurons.
//! Exit codes: 0 ok, 2 usage, 3 file format, 4 cross-artifact compatibility.

mod commands;
mod config;

use clap::Parser;
use dsm_core::Error;

#[derive(Parser)]
#[command(
    name = "dsmprune",
    about = "Integrated-gradients neuron attribution and pruning pipeline",
    version,
    disable_version_flag = true
)]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Compat(_) => 4,
        Error::Format { .. } | Error::Jsonl { .. } => 3,
        _ => 2,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Compat(_) => "compat",
        Error::Format { .. } | Error::Jsonl { .. } => "format",
        Error::Io(_) => "io",
        Error::Diverged { .. } => "diverged",
        _ => "usage",
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        let code = exit_code(&e);
        // single line, machine-parsable: key=value with a quoted message
        eprintln!("error code={code} kind={} msg={:?}", kind(&e), e.to_string());
        std::process::exit(code);
    }
}
