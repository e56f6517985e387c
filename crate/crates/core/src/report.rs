//! Results CSV and the revenue/regret comparison tables built from it.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::auction::Setting;
use crate::error::{Error, Result};

pub const RESULTS_HEADER: &str = "# caforge-results v1";

/// Display order of known mechanisms; others follow in order of appearance.
const MECHANISM_ORDER: [&str; 6] = ["vcg", "ama", "vvca", "local_ama", "canet", "caformer"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mechanism: String,
    pub setting: Setting,
    pub bidders: usize,
    pub items: usize,
    pub revenue: f64,
    pub regret: f64,
    pub regret_max: f64,
    pub ir_violations: usize,
    pub feasibility_max_violation: f64,
    pub samples: usize,
    pub misreport_steps: usize,
    pub seed: u64,
}

impl ResultRow {
    pub fn column(&self) -> Column {
        Column {
            setting: self.setting,
            bidders: self.bidders,
            items: self.items,
        }
    }
}

/// One (setting, scale) column of a table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Column {
    pub setting: Setting,
    pub bidders: usize,
    pub items: usize,
}

impl std::fmt::Display for Column {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}x{}", self.setting, self.bidders, self.items)
    }
}

/// Appends rows, writing the versioned header when the sink is empty.
pub fn append_results<W: Write>(out: W, rows: &[ResultRow], fresh: bool) -> Result<()> {
    let mut out = out;
    if fresh {
        writeln!(out, "{RESULTS_HEADER}").map_err(|e| Error::Format(e.to_string()))?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_results<R: BufRead>(mut input: R) -> Result<Vec<ResultRow>> {
    let mut first = String::new();
    input.read_line(&mut first).map_err(|e| Error::Format(e.to_string()))?;
    if first.trim_end() != RESULTS_HEADER {
        return Err(Error::Format(format!(
            "expected header {RESULTS_HEADER:?}, found {:?}",
            first.trim_end()
        )));
    }
    let mut reader = csv::Reader::from_reader(input);
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub revenue: f64,
    pub regret: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<Column>,
    pub mechanisms: Vec<String>,
    /// `cells[mechanism][column]`.
    pub cells: Vec<Vec<Option<Cell>>>,
    pub warnings: Vec<String>,
}

impl Table {
    /// Builds the grid; a later row for the same (mechanism, column)
    /// replaces an earlier one.
    pub fn build(rows: &[ResultRow]) -> Result<Table> {
        if rows.is_empty() {
            return Err(Error::config("no result rows to report"));
        }
        let mut latest: BTreeMap<(String, Column), &ResultRow> = BTreeMap::new();
        let mut warnings = Vec::new();
        let mut seen = Vec::new();
        for row in rows {
            if !seen.contains(&row.mechanism) {
                seen.push(row.mechanism.clone());
            }
            if latest.insert((row.mechanism.clone(), row.column()), row).is_some() {
                let msg = format!(
                    "duplicate result for {} at {}; keeping the latest",
                    row.mechanism,
                    row.column()
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        let mut mechanisms: Vec<String> = MECHANISM_ORDER
            .iter()
            .filter(|m| seen.iter().any(|s| s == *m))
            .map(|m| m.to_string())
            .collect();
        mechanisms.extend(seen.into_iter().filter(|s| !MECHANISM_ORDER.contains(&s.as_str())));
        let mut columns: Vec<Column> = rows.iter().map(ResultRow::column).collect();
        columns.sort();
        columns.dedup();

        let mut cells: Vec<Vec<Option<Cell>>> = mechanisms
            .iter()
            .map(|m| {
                columns
                    .iter()
                    .map(|c| {
                        latest.get(&(m.clone(), *c)).map(|r| Cell {
                            revenue: r.revenue,
                            regret: r.regret,
                            best: false,
                        })
                    })
                    .collect()
            })
            .collect();
        for c in 0..columns.len() {
            let best = cells
                .iter()
                .filter_map(|row| row[c].as_ref().map(|cell| cell.revenue))
                .fold(f64::NEG_INFINITY, f64::max);
            for row in cells.iter_mut() {
                if let Some(cell) = row[c].as_mut() {
                    cell.best = cell.revenue == best;
                }
            }
        }
        Ok(Table {
            columns,
            mechanisms,
            cells,
            warnings,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Mechanism |");
        for c in &self.columns {
            s.push_str(&format!(" {c} Rev | {c} Rgt |"));
        }
        s.push_str("\n|---|");
        for _ in &self.columns {
            s.push_str("---:|---:|");
        }
        s.push('\n');
        for (m, row) in self.mechanisms.iter().zip(&self.cells) {
            s.push_str(&format!("| {m} |"));
            for cell in row {
                match cell {
                    Some(c) if c.best => s.push_str(&format!(" **{:.3}** | {:.3} |", c.revenue, c.regret)),
                    Some(c) => s.push_str(&format!(" {:.3} | {:.3} |", c.revenue, c.regret)),
                    None => s.push_str(" - | - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["mechanism".to_string()];
        for c in &self.columns {
            header.push(format!("{c} rev"));
            header.push(format!("{c} rgt"));
        }
        w.write_record(&header)?;
        for (m, row) in self.mechanisms.iter().zip(&self.cells) {
            let mut record = vec![m.clone()];
            for cell in row {
                match cell {
                    Some(c) => {
                        record.push(format!("{:.3}", c.revenue));
                        record.push(format!("{:.3}", c.regret));
                    }
                    None => {
                        record.push("-".into());
                        record.push("-".into());
                    }
                }
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}
