use std::fs;

use sharpcam::trainer::metrics::format_float;
use sharpcam::trainer::{parse_csv, MetricsRow};

use crate::{CliError, MetricsArgs};

pub const PANELS: [&str; 4] = ["accuracy", "ce", "ca", "cd"];
pub const PANEL_HEADER: &str = "step,split,value";

fn panel_value(row: &MetricsRow, panel: &str) -> f64 {
    match panel {
        "accuracy" => row.accuracy,
        "ce" => row.ce_mean,
        "ca" => row.ca_mean,
        _ => row.cd_mean,
    }
}

/// One long-format CSV per panel; train rows first, then test rows, each in
/// input order.
pub fn panels(rows: &[MetricsRow]) -> Vec<(&'static str, String)> {
    let mut ordered: Vec<&MetricsRow> = rows.iter().collect();
    ordered.sort_by_key(|r| r.split);
    PANELS
        .iter()
        .map(|&p| {
            let mut text = format!("{PANEL_HEADER}\n");
            for r in &ordered {
                text.push_str(&format!("{},{},{}\n", r.step, r.split.as_str(), format_float(panel_value(r, p))));
            }
            (p, text)
        })
        .collect()
}

pub fn run(a: &MetricsArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.metrics_csv)
        .map_err(|e| CliError::config(format!("{}: {e}", a.metrics_csv.display())))?;
    let rows = parse_csv(&text)
        .map_err(|(line, msg)| CliError::config(format!("{} line {line}: {msg}", a.metrics_csv.display())))?;
    fs::create_dir_all(&a.out)?;
    for (panel, body) in panels(&rows) {
        fs::write(a.out.join(format!("{panel}.csv")), body)?;
    }
    println!("{} rows -> {}", rows.len(), a.out.display());
    Ok(())
}
