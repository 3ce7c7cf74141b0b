//! Scenario reports: one row per (setting, repeat), emitted as CSV with a
//! fixed column order per scenario kind, or as an aligned console table.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use reprog_core::detector::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// White-box vs black-box reprogramming accuracy per training size.
    Table3,
    /// Direct black-box attack against the stateful detector per `q`.
    Table4,
    /// Surrogate-initialized fine-tuning against the detector per `q`.
    Table5,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Table3 => "table3-analog",
            ScenarioKind::Table4 => "table4-analog",
            ScenarioKind::Table5 => "table5-analog",
        }
    }

    pub fn columns(self) -> &'static [Column] {
        use Column::*;
        match self {
            ScenarioKind::Table3 => &[Repeat, Seed, Tr, Ts, Q, Rt, BRt, Gap, Queries],
            ScenarioKind::Table4 => &[Repeat, Seed, Tr, Ts, Q, BRt, Queries, NominalQueries, Detections, K, SigmaStar, Accounts, Aborted],
            ScenarioKind::Table5 => {
                &[Repeat, Seed, Tr, Ts, Rs, Q, BRt, Queries, NominalQueries, Detections, K, SigmaStar, Accounts, Aborted]
            }
        }
    }

    fn from_header(header: &[&str]) -> Option<Self> {
        [ScenarioKind::Table3, ScenarioKind::Table4, ScenarioKind::Table5]
            .into_iter()
            .find(|k| k.columns().iter().map(|c| c.name()).eq(header.iter().copied()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Repeat,
    Seed,
    Tr,
    Ts,
    Q,
    Rs,
    Rt,
    BRt,
    Gap,
    Queries,
    NominalQueries,
    Detections,
    K,
    SigmaStar,
    Accounts,
    Aborted,
}

impl Column {
    pub fn name(self) -> &'static str {
        match self {
            Column::Repeat => "repeat",
            Column::Seed => "seed",
            Column::Tr => "tr",
            Column::Ts => "ts",
            Column::Q => "q",
            Column::Rs => "r_s",
            Column::Rt => "r_t",
            Column::BRt => "br_t",
            Column::Gap => "gap",
            Column::Queries => "queries",
            Column::NominalQueries => "nominal_queries",
            Column::Detections => "detections",
            Column::K => "k",
            Column::SigmaStar => "sigma_star",
            Column::Accounts => "accounts",
            Column::Aborted => "aborted",
        }
    }
}

/// One report row; columns a scenario does not produce stay `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportRow {
    pub repeat: u64,
    pub seed: u64,
    pub tr: u64,
    pub ts: u64,
    pub q: Option<u64>,
    pub r_s: Option<f64>,
    pub r_t: Option<f64>,
    pub br_t: Option<f64>,
    pub gap: Option<f64>,
    pub queries: Option<u64>,
    /// `(q + 1) * ts`, the accounting under which published query counts
    /// are reported; `queries` counts actual channel calls.
    pub nominal_queries: Option<u64>,
    pub detections: Option<u64>,
    pub k: Option<u64>,
    pub sigma_star: Option<f64>,
    pub accounts: Option<u64>,
    pub aborted: Option<bool>,
}

enum Cell {
    Int(Option<u64>),
    Float(Option<f64>),
    Bool(Option<bool>),
}

impl ReportRow {
    fn cell(&self, c: Column) -> Cell {
        match c {
            Column::Repeat => Cell::Int(Some(self.repeat)),
            Column::Seed => Cell::Int(Some(self.seed)),
            Column::Tr => Cell::Int(Some(self.tr)),
            Column::Ts => Cell::Int(Some(self.ts)),
            Column::Q => Cell::Int(self.q),
            Column::Rs => Cell::Float(self.r_s),
            Column::Rt => Cell::Float(self.r_t),
            Column::BRt => Cell::Float(self.br_t),
            Column::Gap => Cell::Float(self.gap),
            Column::Queries => Cell::Int(self.queries),
            Column::NominalQueries => Cell::Int(self.nominal_queries),
            Column::Detections => Cell::Int(self.detections),
            Column::K => Cell::Int(self.k),
            Column::SigmaStar => Cell::Float(self.sigma_star),
            Column::Accounts => Cell::Int(self.accounts),
            Column::Aborted => Cell::Bool(self.aborted),
        }
    }

    fn set(&mut self, c: Column, raw: &str) -> Result<(), String> {
        let int = |s: &str| -> Result<Option<u64>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| format!("{}: {e}", c.name()))
            }
        };
        let float = |s: &str| -> Result<Option<f64>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| format!("{}: {e}", c.name()))
            }
        };
        let required = |v: Option<u64>| v.ok_or_else(|| format!("{} may not be empty", c.name()));
        match c {
            Column::Repeat => self.repeat = required(int(raw)?)?,
            Column::Seed => self.seed = required(int(raw)?)?,
            Column::Tr => self.tr = required(int(raw)?)?,
            Column::Ts => self.ts = required(int(raw)?)?,
            Column::Q => self.q = int(raw)?,
            Column::Rs => self.r_s = float(raw)?,
            Column::Rt => self.r_t = float(raw)?,
            Column::BRt => self.br_t = float(raw)?,
            Column::Gap => self.gap = float(raw)?,
            Column::Queries => self.queries = int(raw)?,
            Column::NominalQueries => self.nominal_queries = int(raw)?,
            Column::Detections => self.detections = int(raw)?,
            Column::K => self.k = int(raw)?,
            Column::SigmaStar => self.sigma_star = float(raw)?,
            Column::Accounts => self.accounts = int(raw)?,
            Column::Aborted => {
                self.aborted = match raw {
                    "" => None,
                    "true" => Some(true),
                    "false" => Some(false),
                    other => return Err(format!("aborted: expected true/false, got {other:?}")),
                }
            }
        }
        Ok(())
    }

    /// sigma* recomputed from the row's D, Q and k, when all are present
    /// and Q > 0.
    pub fn recomputed_sigma_star(&self) -> Option<f64> {
        let (d, q, k) = (self.detections?, self.queries?, self.k?);
        stats(d, q, k as usize).ok().map(|s| s.sigma_star)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub kind: ScenarioKind,
    pub rows: Vec<ReportRow>,
}

impl ScenarioReport {
    pub fn new(kind: ScenarioKind) -> Self {
        Self { kind, rows: Vec::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let cols = self.kind.columns();
        w.write_record(cols.iter().map(|c| c.name())).expect("in-memory write");
        for row in &self.rows {
            w.write_record(cols.iter().map(|&c| match row.cell(c) {
                Cell::Int(v) => v.map(|v| v.to_string()).unwrap_or_default(),
                // Display for f64 is the shortest string that parses back exactly
                Cell::Float(v) => v.map(|v| v.to_string()).unwrap_or_default(),
                Cell::Bool(v) => v.map(|v| v.to_string()).unwrap_or_default(),
            }))
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn parse_csv(text: &str) -> Result<Self, String> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| e.to_string())?.clone();
        let names: Vec<&str> = header.iter().collect();
        let kind = ScenarioKind::from_header(&names).ok_or_else(|| format!("unrecognized report header {names:?}"))?;
        let mut report = Self::new(kind);
        for rec in r.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            let mut row = ReportRow::default();
            for (&c, raw) in kind.columns().iter().zip(rec.iter()) {
                row.set(c, raw)?;
            }
            report.rows.push(row);
        }
        Ok(report)
    }

    pub fn to_console(&self) -> String {
        let cols = self.kind.columns();
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|row| {
                cols.iter()
                    .map(|&c| match row.cell(c) {
                        Cell::Int(v) => v.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                        Cell::Float(v) => v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                        Cell::Bool(v) => v.map(|v| if v { "yes" } else { "no" }.to_string()).unwrap_or_else(|| "-".into()),
                    })
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = cols
            .iter()
            .enumerate()
            .map(|(i, c)| cells.iter().map(|r| r[i].len()).chain([c.name().len()]).max().unwrap_or(0))
            .collect();
        let mut out = format!("# {}\n", self.kind.name());
        let line = |items: Vec<&str>| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        writeln!(out, "{}", line(cols.iter().map(|c| c.name()).collect())).unwrap();
        for r in &cells {
            writeln!(out, "{}", line(r.iter().map(String::as_str).collect())).unwrap();
        }
        out
    }

    pub fn emit(&self, path: &Path, format: &str) -> std::io::Result<()> {
        let text = match format {
            "console" => self.to_console(),
            _ => self.to_csv(),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::File::create(path)?.write_all(text.as_bytes())
    }

    /// Means of a float column grouped by an integer key column, in key order.
    pub fn mean_by(&self, key: impl Fn(&ReportRow) -> u64, value: impl Fn(&ReportRow) -> Option<f64>) -> Vec<(u64, f64)> {
        let mut groups: std::collections::BTreeMap<u64, (f64, usize)> = Default::default();
        for row in &self.rows {
            if let Some(v) = value(row) {
                let g = groups.entry(key(row)).or_default();
                g.0 += v;
                g.1 += 1;
            }
        }
        groups.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}
