//! The `compare` command: two metrics files side by side, per epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::CliError;

/// A metrics CSV keyed by epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: BTreeMap<u64, Vec<f64>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        let mut reader = csv::Reader::from_reader(bytes);
        let header = reader.headers().map_err(|e| e.to_string())?.clone();
        if header.get(0) != Some("epoch") {
            return Err("first column must be 'epoch'".into());
        }
        let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = BTreeMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let line = i + 2;
            let epoch: u64 = rec[0]
                .parse()
                .map_err(|_| format!("line {line}: bad epoch '{}'", &rec[0]))?;
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| format!("line {line}: bad number '{v}'")))
                .collect::<Result<Vec<_>, _>>()?;
            if rows.insert(epoch, values).is_some() {
                return Err(format!("line {line}: duplicate epoch {epoch}"));
            }
        }
        Ok(Self { columns, rows })
    }
}

/// Values of the shared columns at the shared epochs, with `b - a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<(f64, f64, f64)>)>,
    pub only_a: Vec<u64>,
    pub only_b: Vec<u64>,
}

impl Comparison {
    pub fn max_abs_delta(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|(_, c)| c.iter().map(|t| t.2.abs()))
            .fold(0.0, f64::max)
    }

    /// Long-format CSV: `epoch,column,a,b,delta`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(sink);
        let io = |e: csv::Error| CliError::Runtime(e.to_string());
        w.write_record(["epoch", "column", "a", "b", "delta"]).map_err(io)?;
        for (epoch, cells) in &self.rows {
            for (name, (a, b, d)) in self.columns.iter().zip(cells) {
                w.write_record([epoch.to_string(), name.clone(), a.to_string(), b.to_string(), d.to_string()])
                    .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn compare(a: &MetricsTable, b: &MetricsTable) -> Comparison {
    let shared: Vec<(String, usize, usize)> = a
        .columns
        .iter()
        .enumerate()
        .filter_map(|(i, c)| b.columns.iter().position(|x| x == c).map(|j| (c.clone(), i, j)))
        .collect();
    let mut rows = Vec::new();
    for (epoch, va) in &a.rows {
        if let Some(vb) = b.rows.get(epoch) {
            let cells = shared.iter().map(|&(_, i, j)| (va[i], vb[j], vb[j] - va[i])).collect();
            rows.push((*epoch, cells));
        }
    }
    Comparison {
        columns: shared.into_iter().map(|c| c.0).collect(),
        rows,
        only_a: a.rows.keys().filter(|e| !b.rows.contains_key(e)).copied().collect(),
        only_b: b.rows.keys().filter(|e| !a.rows.contains_key(e)).copied().collect(),
    }
}

/// Table of the headline columns: errors, loss and learning rate.
pub fn render(c: &Comparison) -> String {
    let wanted = ["train_loss", "train_err", "test_err", "lr"];
    let idx: Vec<(usize, &str)> = wanted
        .iter()
        .filter_map(|w| c.columns.iter().position(|x| x == w).map(|i| (i, *w)))
        .collect();
    let mut s = String::new();
    let _ = write!(s, "{:>6}", "epoch");
    for (_, name) in &idx {
        let _ = write!(s, " {:>12} {:>12} {:>12}", format!("{name}.a"), format!("{name}.b"), "delta");
    }
    s.push('\n');
    for (epoch, cells) in &c.rows {
        let _ = write!(s, "{epoch:>6}");
        for (i, _) in &idx {
            let (a, b, d) = cells[*i];
            let _ = write!(s, " {a:>12.5} {b:>12.5} {d:>+12.5}");
        }
        s.push('\n');
    }
    if !c.only_a.is_empty() {
        let _ = writeln!(s, "epochs only in a: {:?}", c.only_a);
    }
    if !c.only_b.is_empty() {
        let _ = writeln!(s, "epochs only in b: {:?}", c.only_b);
    }
    s
}
