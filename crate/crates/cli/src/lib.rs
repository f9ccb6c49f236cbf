//! Command-line front end: argument parsing, config merging, and the
//! train / eval / dump-maps / count-params subcommands.

pub mod args;
pub mod commands;
pub mod config;
pub mod pgm;

use clap::Parser;

/// A command failure carrying its process exit code: 2 for usage and
/// configuration errors, 3 for runtime failures.
#[derive(Debug)]
pub struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    pub fn usage(message: impl ToString) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    pub fn runtime(message: impl ToString) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }

    pub fn code(&self) -> i32 {
        self.code
    }

    pub fn message(&self) -> &str {
        &self.message
    }
}

/// Parses arguments, dispatches, and returns the process exit code.
pub fn run() -> i32 {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version (exit 0) and usage errors (exit 2).
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        args::Command::Train(a) => commands::cmd_train(a),
        args::Command::Eval(a) => commands::cmd_eval(a),
        args::Command::DumpMaps(a) => commands::cmd_dump_maps(a),
        args::Command::CountParams(a) => commands::cmd_count_params(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}
