//! `cace` — command-line front end for complier-average causal effect
//! estimation and the factorial simulation study.
//!
//! Exit codes: 0 success; 1 usage; 2 unusable input (I/O, parse, schema,
//! method/outcome pairing); 3 numerical failure on valid input.

mod commands;

use clap::Parser;

use commands::Cli;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help and version requests arrive here too; they are not errors
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };

    if let Some(threads) = cli.thread_count() {
        // a second initialization (e.g. under tests) is harmless: the pool
        // is already running with the earlier size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }

    if let Err(err) = cli.run() {
        eprintln!("error: {err}");
        std::process::exit(if err.is_data_error() { 2 } else { 3 });
    }
}
