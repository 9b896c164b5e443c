//! Output rendering: trace and report CSVs, the rule audit log, and the
//! fixed-width side-by-side results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::engine::{AuditRecord, SweepRow};
use crate::error::{Error, Result};
use crate::metrics::{Method, RunReport};
use crate::traffic::Packet;

pub const TRACE_CSV_HEADER: &str = "slot,class,flow_id,threat_marker";
pub const REPORT_CSV_HEADER: &str =
    "H_target,dh_target,H_achieved,dh_achieved,lambda,method,loss_pct,imb_tot,not_analyzed_pct,seed";

/// Trace CSV: one row per packet, empty threat field for benign packets.
pub fn trace_csv(packets: &[Packet]) -> String {
    let mut out = String::with_capacity(packets.len() * 16 + 32);
    out.push_str(TRACE_CSV_HEADER);
    out.push('\n');
    for p in packets {
        let _ = write!(
            out,
            "{},{},{}",
            p.arrival_slot, p.service_class, p.flow_id
        );
        match p.threat_marker {
            Some(id) => {
                let _ = writeln!(out, ",{id}");
            }
            None => out.push_str(",\n"),
        }
    }
    out
}

pub fn report_csv_row(report: &RunReport) -> String {
    let s = &report.scenario;
    format!(
        "{:.4},{:.4},{:.6},{:.6},{:.4},{},{:.6},{:.6},{:.6},{}",
        s.target_h,
        s.target_dh,
        s.achieved_h,
        s.achieved_dh,
        s.lambda,
        report.method.as_str(),
        report.loss_pct,
        report.imb_tot,
        report.not_analyzed_pct,
        s.seed
    )
}

/// Full sweep CSV (successful rows only; failures are reported in the
/// sweep trailer).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in rows {
        if let Ok(reports) = &row.outcome {
            for report in reports {
                out.push_str(&report_csv_row(report));
                out.push('\n');
            }
        }
    }
    out
}

/// Rule audit log in JSON-lines form, one line per rule change.
pub fn audit_jsonl(records: &[AuditRecord]) -> Result<String> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

/// Per-q estimator output plus the summary line used by `analyze`.
pub fn analyze_output(est: &crate::fractal::MfEstimate) -> String {
    let mut out = String::from("q,h_q,r2\n");
    for (q, h) in est.hq_samples() {
        let r2 = est.fit_quality(*q).unwrap_or(0.0);
        let _ = writeln!(out, "{q},{h:.6},{r2:.6}");
    }
    let _ = writeln!(out, "H={:.6} dh={:.6}", est.h, est.dh);
    out
}

/// Seed-averaged side-by-side SM/PM table over the sweep rows, in the
/// paired-column layout of the reference results.
pub fn render_table(rows: &[SweepRow]) -> String {
    #[derive(Default)]
    struct Cell {
        loss: Vec<f64>,
        imb: Vec<f64>,
        na: Vec<f64>,
    }
    // key: (H, dh, lambda) as formatted strings for stable grouping
    let mut cells: BTreeMap<String, BTreeMap<Method, Cell>> = BTreeMap::new();
    for row in rows {
        if let Ok(reports) = &row.outcome {
            for report in reports {
                let key = format!(
                    "H={:.2}, dh={:.1}, lambda={:.3}",
                    row.target_h, row.target_dh, row.lambda
                );
                let cell = cells
                    .entry(key)
                    .or_default()
                    .entry(report.method)
                    .or_default();
                cell.loss.push(report.loss_pct);
                cell.imb.push(report.imb_tot);
                cell.na.push(report.not_analyzed_pct);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<34} {:>21} {:>21} {:>21}",
        "Traffic parameters", "Packet loss", "IMB", "Not analyzed"
    );
    let _ = writeln!(
        out,
        "{:<34} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "", "SM", "PM", "SM", "PM", "SM", "PM"
    );
    for (key, methods) in &cells {
        let get = |m: Method, f: fn(&Cell) -> &Vec<f64>| {
            methods.get(&m).map(|c| mean(f(c))).unwrap_or(f64::NAN)
        };
        let _ = writeln!(
            out,
            "{:<34} {:>10.2} {:>10.2} {:>10.4} {:>10.4} {:>10.2} {:>10.2}",
            key,
            get(Method::Sm, |c| &c.loss),
            get(Method::Pm, |c| &c.loss),
            get(Method::Sm, |c| &c.imb),
            get(Method::Pm, |c| &c.imb),
            get(Method::Sm, |c| &c.na),
            get(Method::Pm, |c| &c.na),
        );
    }
    out
}

/// One-column numeric text file (comments and blanks ignored).
pub fn parse_series_file(text: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line.parse().map_err(|e| {
            Error::Config(format!("series line {}: {e}", lineno + 1))
        })?;
        values.push(v);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_shape() {
        let mut a = Packet::synthetic(3, 1, 7);
        a.threat_marker = Some(12);
        let b = Packet::synthetic(4, 0, 2);
        let csv = trace_csv(&[a, b]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRACE_CSV_HEADER);
        assert_eq!(lines[1], "3,1,7,12");
        assert_eq!(lines[2], "4,0,2,");
    }

    #[test]
    fn series_file_parsing() {
        let parsed = parse_series_file("1.5\n\n# comment\n2.0\n").unwrap();
        assert_eq!(parsed, vec![1.5, 2.0]);
        assert!(parse_series_file("abc\n").is_err());
    }
}
