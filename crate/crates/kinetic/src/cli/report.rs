//! Audit reports: a CSV table of cases plus a JSON summary whose floats
//! are printed with 17 significant digits.

use super::AppError;
use serde::ser::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

/// Pretty JSON with every float as `{:.16e}`.
pub struct FixedFormatter(PrettyFormatter<'static>);

impl Default for FixedFormatter {
    fn default() -> Self {
        Self(PrettyFormatter::with_indent(b"  "))
    }
}

impl Formatter for FixedFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serialises with [`FixedFormatter`]; non-finite floats become `null`.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFormatter::default());
    value.serialize(&mut ser).expect("in-memory serialisation");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json writes utf-8")
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Self::Num(x) => format!("{x:.16e}"),
            Self::Int(i) => i.to_string(),
            Self::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Self::Num(x)
    }
}

impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Self::Int(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Self::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Self::Text(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Self::Text(x)
    }
}

/// A declared tolerance and whether the measured value meets it.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub target: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AuditReport {
    pub audit: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub constants: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
    /// Kept out of the JSON so that re-runs compare byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl AuditReport {
    pub fn new(audit: &str, seed: u64, columns: &[&str]) -> Self {
        Self {
            audit: audit.to_string(),
            seed,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            constants: BTreeMap::new(),
            checks: Vec::new(),
            passed: true,
            wall_time: Duration::ZERO,
        }
    }

    pub fn row(&mut self, cells: Vec<Cell>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn constant(&mut self, name: &str, value: f64) {
        self.constants.insert(name.to_string(), value);
    }

    pub fn check(&mut self, name: &str, value: f64, target: impl Into<String>, passed: bool) {
        let passed = passed && !value.is_nan();
        self.passed &= passed;
        self.checks.push(Check {
            name: name.to_string(),
            value,
            target: target.into(),
            passed,
        });
    }

    /// `|value - centre| <= tol`
    pub fn check_within(&mut self, name: &str, value: f64, centre: f64, tol: f64) {
        self.check(name, value, format!("{centre} +- {tol}"), (value - centre).abs() <= tol);
    }

    pub fn check_at_most(&mut self, name: &str, value: f64, bound: f64) {
        self.check(name, value, format!("<= {bound:e}"), value <= bound);
    }

    pub fn check_at_least(&mut self, name: &str, value: f64, bound: f64) {
        self.check(name, value, format!(">= {bound:e}"), value >= bound);
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn to_csv(&self) -> Result<String, AppError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render))?;
        }
        let bytes = w.into_inner().map_err(|e| AppError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 cells"))
    }

    /// Writes `<name>.csv` and `<name>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), AppError> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.audit));
        let json = dir.join(format!("{}.json", self.audit));
        std::fs::write(&csv, self.to_csv()?)?;
        std::fs::write(&json, self.to_json())?;
        Ok((csv, json))
    }

    /// One line per check.
    pub fn summary(&self) -> String {
        let mut s = format!("audit {} ({}):\n", self.audit, if self.passed { "pass" } else { "FAIL" });
        for c in &self.checks {
            s.push_str(&format!("  [{}] {} = {:.6e} (target {})\n", if c.passed { "ok" } else { "!!" }, c.name, c.value, c.target));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_digits() {
        let s = to_json(&serde_json::json!({"a": 0.1, "b": [1.0, -2.5e-300], "n": 3, "x": f64::NAN}));
        assert!(s.contains("\"a\": 1.0000000000000001e-1"), "{s}");
        assert!(s.contains("-2.5000000000000000e-300"));
        assert!(s.contains("\"n\": 3"));
        assert!(s.contains("\"x\": null"));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["a"].as_f64(), Some(0.1));
    }

    #[test]
    fn csv_quotes_and_checks_accumulate() {
        let mut r = AuditReport::new("demo", 3, &["id", "value"]);
        r.row(vec!["a,b".into(), 1.5.into()]);
        r.check_within("slope", 0.52, 0.5, 0.1);
        assert!(r.passed);
        r.check_at_most("err", f64::NAN, 1.0);
        assert!(!r.passed);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv, "id,value\n\"a,b\",1.5000000000000000e0\n");
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        assert_eq!(&rd.records().next().unwrap().unwrap()[0], "a,b");
        assert!(!r.to_json().contains("wall_time"));
    }
}
