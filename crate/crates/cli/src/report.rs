use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use caforge_core::report::{read_results, Table};
use clap::Args;

use crate::error::{CliError, CliResult};
use crate::experiment::create_dir;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results CSV appended to by `eval`.
    #[arg(long, env = "CAFORGE_RESULTS")]
    pub results: PathBuf,
    /// Directory for `table.md` and `table.csv`; stdout only when absent.
    #[arg(long, env = "CAFORGE_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
}

pub fn run(args: &ReportArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = File::open(&args.results).map_err(|e| CliError::io(&args.results, e))?;
    let rows = read_results(BufReader::new(file))?;
    let table = Table::build(&rows)?;
    let markdown = table.to_markdown();
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        let md = dir.join("table.md");
        fs::write(&md, &markdown).map_err(|e| CliError::io(&md, e))?;
        let csv = dir.join("table.csv");
        let out = File::create(&csv).map_err(|e| CliError::io(&csv, e))?;
        table.write_csv(out)?;
    }
    write!(out, "{markdown}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}
