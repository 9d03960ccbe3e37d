//! Tabular output as versioned CSV or JSON lines.
//!
//! CSV output starts with one comment row naming the schema version and
//! table, followed by a normal header row.

use std::io::Write;

use serde_json::{Map, Value};

use crate::bench::{BenchPolicy, GapTable, SweepParam, SweepRow};
use crate::error::{Error, Result};
use crate::index::IndexTable;
use crate::instance::Instance;
use crate::mdp::EvalReport;
use crate::sim::SimReport;
use crate::split::OptimalSplit;

pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json-lines" | "ndjson" => Ok(Format::Jsonl),
            _ => Err(Error::InvalidParameter(format!("unknown format `{s}` (expected csv or jsonl)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn to_csv(&self) -> String {
        match self {
            Cell::Num(x) => format!("{x}"),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Num(x) => serde_json::Number::from_f64(*x).map(Value::Number).unwrap_or(Value::Null),
            Cell::Int(i) => Value::from(*i),
            Cell::Text(s) => Value::from(s.as_str()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(x) => Some(*x),
            Cell::Int(i) => Some(*i as f64),
            Cell::Text(_) => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u32> for Cell {
    fn from(x: u32) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: Vec<String>) -> Self {
        Table { name: name.to_string(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn write(&self, out: &mut dyn Write, format: Format) -> Result<()> {
        match format {
            Format::Csv => {
                writeln!(out, "# cloudq-csv v{CSV_SCHEMA_VERSION} table={}", self.name)?;
                let mut w = csv::Writer::from_writer(out);
                w.write_record(&self.columns)?;
                for row in &self.rows {
                    w.write_record(row.iter().map(Cell::to_csv))?;
                }
                w.flush()?;
            }
            Format::Jsonl => {
                for row in &self.rows {
                    let mut obj = Map::new();
                    obj.insert("table".into(), Value::from(self.name.as_str()));
                    for (c, v) in self.columns.iter().zip(row) {
                        obj.insert(c.clone(), v.to_json());
                    }
                    writeln!(out, "{}", Value::Object(obj))?;
                }
            }
        }
        Ok(())
    }

    pub fn to_string(&self, format: Format) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf, format).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("tables are UTF-8")
    }

    /// Reads a table written by [`Table::write`] in CSV form.
    pub fn read_csv(text: &str) -> Result<Table> {
        let mut lines = text.splitn(2, '\n');
        let first = lines.next().unwrap_or("");
        let rest = lines.next().unwrap_or("");
        let prefix = format!("# cloudq-csv v{CSV_SCHEMA_VERSION} table=");
        let name = first
            .trim_end()
            .strip_prefix(&prefix)
            .ok_or_else(|| Error::Parse { line: 1, message: format!("expected `{prefix}<name>` header") })?;
        let mut r = csv::Reader::from_reader(rest.as_bytes());
        let columns = r.headers()?.iter().map(String::from).collect();
        let mut t = Table::new(name, columns);
        for rec in r.records() {
            let rec = rec?;
            t.rows.push(
                rec.iter()
                    .map(|s| match s.parse::<i64>() {
                        Ok(i) => Cell::Int(i),
                        Err(_) => s.parse::<f64>().map(Cell::Num).unwrap_or_else(|_| Cell::Text(s.into())),
                    })
                    .collect(),
            );
        }
        Ok(t)
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn instance_label(inst: &Instance) -> String {
    if inst.name.is_empty() {
        "instance".into()
    } else {
        inst.name.clone()
    }
}

pub fn split_table(inst: &Instance, s: &OptimalSplit) -> Table {
    let mut c =
        cols(&["instance", "regime", "lambda", "C", "C_star", "alpha_star", "objective", "kkt_residual", "method"]);
    c.extend((0..s.split.rates.len()).map(|k| format!("lambda_{k}")));
    let mut t = Table::new("split", c);
    let method = match &s.provenance {
        crate::split::SplitProvenance::Multiplier => "multiplier".to_string(),
        crate::split::SplitProvenance::ProjectedGradient { reason } => format!("projected_gradient: {reason}"),
    };
    let mut row: Vec<Cell> = vec![
        instance_label(inst).into(),
        inst.regime.as_str().into(),
        inst.lambda.into(),
        inst.c.into(),
        s.c_star.into(),
        s.alpha_star.into(),
        s.objective.into(),
        s.kkt.max().into(),
        method.into(),
    ];
    row.extend(s.split.rates.iter().map(|&r| Cell::from(r)));
    t.push(row);
    t
}

/// Long format: one row per node and state, one column per family given.
pub fn index_table(families: &[Vec<IndexTable>]) -> Table {
    let mut c = cols(&["node", "state"]);
    c.extend(families.iter().map(|f| f[0].family.to_string()));
    let mut t = Table::new("indices", c);
    let nodes = families[0].len();
    for k in 0..nodes {
        for i in 0..families[0][k].values.len() {
            let mut row: Vec<Cell> = vec![families[0][k].node_id.into(), i.into()];
            row.extend(families.iter().map(|f| Cell::from(f[k].value(i))));
            t.push(row);
        }
    }
    t
}

pub fn eval_table(rows: &[(String, EvalReport, Option<f64>)]) -> Table {
    let mut t = Table::new(
        "evaluation",
        cols(&[
            "instance",
            "policy",
            "gain",
            "profit_per_job",
            "gap_pct",
            "method",
            "states",
            "iterations",
            "residual",
        ]),
    );
    for (name, r, gap) in rows {
        let method = serde_json::to_value(r.method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        t.push(vec![
            name.clone().into(),
            r.policy.clone().into(),
            r.gain.into(),
            r.profit_per_job.into(),
            gap.map(Cell::from).unwrap_or_else(|| "".into()),
            method.into(),
            r.states.into(),
            r.iterations.into(),
            r.residual.into(),
        ]);
    }
    t
}

pub fn sim_table(inst: &Instance, r: &SimReport) -> Table {
    let mut c = cols(&[
        "instance",
        "policy",
        "regime",
        "replications",
        "horizon",
        "warmup",
        "seed",
        "cost_rate",
        "cost_rate_hw",
        "profit_per_job",
        "profit_per_job_hw",
        "external_fraction",
        "external_fraction_hw",
    ]);
    for k in 1..=r.abandonment_rate.len() {
        c.extend([format!("abandon_rate_{k}"), format!("abandon_rate_hw_{k}"), format!("abandon_count_{k}")]);
    }
    let mut t = Table::new("simulation", c);
    let mut row: Vec<Cell> = vec![
        instance_label(inst).into(),
        r.policy.clone().into(),
        r.regime.as_str().into(),
        r.replications.into(),
        r.horizon.into(),
        r.warmup.into(),
        r.seed.into(),
        r.cost_rate.mean.into(),
        r.cost_rate.half_width.into(),
        r.profit_per_job.mean.into(),
        r.profit_per_job.half_width.into(),
        r.external_fraction.mean.into(),
        r.external_fraction.half_width.into(),
    ];
    for (e, &n) in r.abandonment_rate.iter().zip(&r.abandonment_counts) {
        row.extend([Cell::from(e.mean), Cell::from(e.half_width), Cell::from(n)]);
    }
    t.push(row);
    t
}

/// Per-instance records of a gap study.
pub fn gap_records_table(g: &GapTable) -> Table {
    let mut c = cols(&["index", "instance", "regime", "mu1", "rho", "theta", "C", "lambda", "z_star"]);
    for p in &g.policies {
        c.extend([format!("z_{}", p.label()), format!("gap_{}", p.label())]);
    }
    for p in g.policies.iter().filter(|p| **p != BenchPolicy::PI) {
        c.push(format!("pi_gain_over_{}", p.label()));
    }
    c.push("error".into());
    let mut t = Table::new("gap_records", c);
    for r in &g.records {
        let inst = &r.instance;
        let mut row: Vec<Cell> = vec![
            r.index.into(),
            instance_label(inst).into(),
            inst.regime.as_str().into(),
            inst.nodes[0].mu.into(),
            inst.nominal_load().into(),
            inst.theta.into(),
            inst.c.into(),
            inst.lambda.into(),
            r.z_star.into(),
        ];
        for &p in &g.policies {
            match r.result(p) {
                Some(x) => row.extend([Cell::from(x.profit), Cell::from(x.gap)]),
                None => row.extend([Cell::from(f64::NAN), Cell::from(f64::NAN)]),
            }
        }
        for &p in g.policies.iter().filter(|p| **p != BenchPolicy::PI) {
            row.push(r.pi_improvement(p).unwrap_or(f64::NAN).into());
        }
        row.push(r.error.clone().unwrap_or_default().into());
        t.push(row);
    }
    t
}

pub fn gap_summary_table(g: &GapTable) -> Table {
    let mut t = Table::new("gap_summary", cols(&["policy", "min_gap_pct", "avg_gap_pct", "max_gap_pct", "instances"]));
    for s in &g.summaries {
        t.push(vec![s.policy.label().into(), s.min.into(), s.avg.into(), s.max.into(), s.count.into()]);
    }
    t
}

pub fn sweep_table(param: SweepParam, rows: &[SweepRow]) -> Table {
    let mut c = vec![param.name()];
    if let Some(first) = rows.first() {
        c.extend(first.fields.iter().map(|(k, _)| k.clone()));
    }
    let mut t = Table::new("sweep", c);
    for r in rows {
        let mut row = vec![Cell::from(r.value)];
        row.extend(r.fields.iter().map(|(_, v)| Cell::from(*v)));
        t.push(row);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_header() {
        let mut t = Table::new("demo", cols(&["a", "b", "c"]));
        t.push(vec![1usize.into(), 0.25.into(), "x,y".into()]);
        let text = t.to_string(Format::Csv);
        assert!(text.starts_with("# cloudq-csv v1 table=demo\na,b,c\n"));
        let back = Table::read_csv(&text).unwrap();
        assert_eq!(back, t);
        assert!(Table::read_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn jsonl_rows() {
        let mut t = Table::new("demo", cols(&["a", "b"]));
        t.push(vec![2usize.into(), f64::NAN.into()]);
        let text = t.to_string(Format::Jsonl);
        let v: Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["a"], 2);
        assert!(v["b"].is_null());
        assert_eq!(v["table"], "demo");
    }

    #[test]
    fn format_names() {
        assert_eq!("JSONL".parse::<Format>().unwrap(), Format::Jsonl);
        assert!("xml".parse::<Format>().is_err());
    }
}
