//! Loopback encoder endpoint: the in-process simulator behind the line protocol.
//!
//! Usage: `codec-stub [--delay-ms N] [--fault negative-bits|malformed|wrong-version]`

use std::io::{stdin, stdout};
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use dualcritic::codec::protocol::{serve, StubFault, StubOptions};

#[derive(Parser)]
#[command(about = "Simulator endpoint speaking the encoder line protocol")]
struct Args {
    /// Delay before answering each encode request, in milliseconds.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Deliberate misbehaviour for contract tests.
    #[arg(long)]
    fault: Option<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let fault = match args.fault.as_deref().map(str::parse::<StubFault>).transpose() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("codec-stub: {e}");
            return ExitCode::from(2);
        }
    };
    let options = StubOptions {
        delay: Duration::from_millis(args.delay_ms),
        fault,
    };
    match serve(stdin().lock(), stdout().lock(), options) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("codec-stub: {e}");
            ExitCode::from(4)
        }
    }
}
