//! The `caforge` command line: argument definitions and command runners.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod gen;
pub mod report;
pub mod train;

use std::io::Write;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

/// Learned and classic combinatorial auctions: generate data, train,
/// evaluate and tabulate results.
#[derive(Debug, Parser)]
#[command(name = "caforge", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample valuation profiles into a binary cache with a CSV preview.
    Gen(gen::GenArgs),
    /// Train a neural mechanism.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint or a baseline mechanism.
    Eval(eval::EvalArgs),
    /// Build revenue/regret tables from a results CSV.
    Report(report::ReportArgs),
}

/// Runs one parsed command; the primary result goes to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Gen(args) => gen::run(&args, out),
        Command::Train(args) => train::run(&args, out),
        Command::Eval(args) => eval::run(&args, out),
        Command::Report(args) => report::run(&args, out),
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn run_args<I, S>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("caforge")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Config(e.to_string()))?;
    execute(cli, out)
}
