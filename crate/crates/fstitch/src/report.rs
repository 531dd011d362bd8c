//! Plain-text tables and CSV output for attack reports.

use std::io;

use fstitch_core::AttackReport;
use serde::Serialize;

/// Renders rows under a header with every column padded to its widest cell.
/// Cells that parse as numbers are right-aligned.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| {
                if c.parse::<f64>().is_ok() {
                    format!("{c:>w$}")
                } else {
                    format!("{c:<w$}")
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&rule.join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub const ATTACK_HEADERS: [&str; 8] = [
    "attack_name",
    "parameter",
    "key_elements_removed",
    "stdev",
    "extraction_rate",
    "accuracy_after",
    "plausible",
    "seed",
];

#[derive(Debug, Serialize)]
struct AttackRow<'a> {
    attack_name: &'a str,
    parameter: f64,
    key_elements_removed: f64,
    stdev: f64,
    extraction_rate: f64,
    accuracy_after: f64,
    plausible: bool,
    seed: u64,
}

impl<'a> From<&'a AttackReport> for AttackRow<'a> {
    fn from(r: &'a AttackReport) -> Self {
        Self {
            attack_name: &r.attack_name,
            parameter: r.parameter,
            key_elements_removed: r.key_elements_removed,
            stdev: r.stdev,
            extraction_rate: r.extraction_rate,
            accuracy_after: r.accuracy_after,
            plausible: r.plausible,
            seed: r.seed,
        }
    }
}

pub fn attack_table(reports: &[AttackReport], key_size: usize) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.attack_name.clone(),
                format!("{}", r.parameter),
                format!("{:.3}/{key_size}", r.key_elements_removed),
                format!("{:.3}", r.stdev),
                format!("{:.3}", r.extraction_rate),
                format!("{:.3}", r.accuracy_after),
                r.plausible.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    render_table(&ATTACK_HEADERS, &rows)
}

/// Writes one CSV row per report, columns named after the report fields.
pub fn write_attack_csv<W: io::Write>(out: W, reports: &[AttackReport]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    if reports.is_empty() {
        w.write_record(ATTACK_HEADERS)?;
    }
    for r in reports {
        w.serialize(AttackRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}
