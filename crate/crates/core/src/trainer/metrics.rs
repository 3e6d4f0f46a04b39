//! Metric snapshots and their CSV form.
//!
//! Header `step,split,accuracy,ce,ca,cd,loss`; floats are written in
//! scientific notation with 11 significant digits.

use std::fmt::Write as _;

use crate::dataset::Split;

pub const CSV_HEADER: &str = "step,split,accuracy,ce,ca,cd,loss";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: Split,
    pub accuracy: f64,
    pub ce_mean: f64,
    pub ca_mean: f64,
    pub cd_mean: f64,
    /// Mean cross-entropy of the split.
    pub loss: f64,
}

pub fn format_float(v: f64) -> String {
    format!("{v:.10e}")
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.split.as_str(),
            format_float(self.accuracy),
            format_float(self.ce_mean),
            format_float(self.ca_mean),
            format_float(self.cd_mean),
            format_float(self.loss)
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if fields.len() != 7 {
            return Err(format!("expected 7 fields, found {}", fields.len()));
        }
        let num = |i: usize, name: &str| -> Result<f64, String> {
            fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| format!("field `{name}` is not a number: `{}`", fields[i]))
        };
        Ok(MetricsRow {
            step: fields[0]
                .trim()
                .parse()
                .map_err(|_| format!("field `step` is not an integer: `{}`", fields[0]))?,
            split: fields[1].trim().parse()?,
            accuracy: num(2, "accuracy")?,
            ce_mean: num(3, "ce")?,
            ca_mean: num(4, "ca")?,
            cd_mean: num(5, "cd")?,
            loss: num(6, "loss")?,
        })
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_line());
    }
    out
}

/// Parses a metrics CSV. Errors carry the 1-based line number.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>, (usize, String)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == CSV_HEADER => {}
        Some((_, h)) => return Err((1, format!("unexpected header `{h}`"))),
        None => return Err((1, "missing header".into())),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricsRow::parse_csv_line(l).map_err(|e| (i + 1, e)))
        .collect()
}
