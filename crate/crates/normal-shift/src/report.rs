//! Report assembly and the text formats written to the output directory.
//! Every float is printed as `{:.16e}`, 17 significant digits, which
//! round-trips through any conforming parser.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Number, Value};

/// `x` as an exact JSON number, `null` when not finite.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        Value::Number(Number::from_str(&fmt_f64(x)).expect("scientific notation is valid JSON"))
    } else {
        Value::Null
    }
}

pub fn num_opt(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

pub fn nums(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| num(x)).collect())
}

/// 17 significant digits; non-finite values print as `nan`, `inf`, `-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// A named pass/fail decision on one measured quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub note: Option<String>,
}

impl Verdict {
    /// `value <= tolerance`; NaN fails.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Verdict { name: name.into(), value, tolerance, pass: value <= tolerance, note: None }
    }

    /// `value >= threshold`, used by negative controls.
    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Verdict { name: name.into(), value, tolerance: threshold, pass: value >= threshold, note: None }
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("name".into(), Value::String(self.name.clone()));
        m.insert("value".into(), num(self.value));
        m.insert("tolerance".into(), num(self.tolerance));
        m.insert("pass".into(), Value::Bool(self.pass));
        if let Some(n) = &self.note {
            m.insert("note".into(), Value::String(n.clone()));
        }
        Value::Object(m)
    }
}

/// Table of numeric rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Csv {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Csv { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Everything one pipeline run produces.
#[derive(Clone, Debug)]
pub struct Report {
    pub action: String,
    pub scenario: String,
    pub seed: u64,
    pub verdicts: Vec<Verdict>,
    /// Action-specific JSON payload.
    pub details: Map<String, Value>,
    pub tables: Vec<(String, Csv)>,
    /// Extra lines for the text summary.
    pub notes: Vec<String>,
}

impl Report {
    pub fn new(action: &str, scenario: &str, seed: u64) -> Self {
        Report {
            action: action.into(),
            scenario: scenario.into(),
            seed,
            verdicts: Vec::new(),
            details: Map::new(),
            tables: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("action".into(), Value::String(self.action.clone()));
        m.insert("scenario".into(), Value::String(self.scenario.clone()));
        m.insert("seed".into(), Value::Number(self.seed.into()));
        m.insert("pass".into(), Value::Bool(self.pass()));
        m.insert("verdicts".into(), Value::Array(self.verdicts.iter().map(Verdict::to_json).collect()));
        m.insert("details".into(), Value::Object(self.details.clone()));
        m.insert(
            "files".into(),
            Value::Array(self.tables.iter().map(|(name, _)| Value::String(name.clone())).collect()),
        );
        Value::Object(m)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario: {}", self.scenario);
        let _ = writeln!(s, "action:   {}", self.action);
        let _ = writeln!(s, "seed:     {}", self.seed);
        let _ = writeln!(s, "verdict:  {}", if self.pass() { "PASS" } else { "FAIL" });
        let _ = writeln!(s);
        let width = self.verdicts.iter().map(|v| v.name.len()).max().unwrap_or(0);
        for v in &self.verdicts {
            let cmp = if v.name.starts_with("control.") { ">=" } else { "<=" };
            let _ = write!(
                s,
                "{} {:width$}  {} {cmp} {}",
                if v.pass { "[pass]" } else { "[FAIL]" },
                v.name,
                fmt_f64(v.value),
                fmt_f64(v.tolerance)
            );
            if let Some(n) = &v.note {
                let _ = write!(s, "  ({n})");
            }
            let _ = writeln!(s);
        }
        let failing: Vec<&str> = self.verdicts.iter().filter(|v| !v.pass).map(|v| v.name.as_str()).collect();
        if !failing.is_empty() {
            let _ = writeln!(s, "\nfailing: {}", failing.join(", "));
        }
        if !self.notes.is_empty() {
            let _ = writeln!(s);
            for n in &self.notes {
                let _ = writeln!(s, "{n}");
            }
        }
        s
    }

    /// Write `report.json`, `summary.txt` and every table into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(&self.to_json()).expect("JSON values serialize");
        json.push('\n');
        std::fs::write(dir.join("report.json"), json)?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        for (name, table) in &self.tables {
            std::fs::write(dir.join(name), table.render())?;
        }
        Ok(())
    }
}
