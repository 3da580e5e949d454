//! Text outputs: scanpaths as JSON lines, `variant,n,p` curves and a summary table.

use super::metrics::MetricsReport;
use super::suite::ScanpathRecord;
use crate::error::{Result, TctError};

pub const CURVE_HEADER: &str = "variant,n,p";
pub const SUMMARY_HEADER: &str =
    "variant,trials,found,not_found,avg_fixations,avg_fixations_within_n_max";

pub fn format_scanpaths(records: &[ScanpathRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out += &serde_json::to_string(r).expect("records serialize");
        out.push('\n');
    }
    out
}

pub fn parse_scanpaths(text: &str, source: &str) -> Result<Vec<ScanpathRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TctError::parse(source, i + 1, e.to_string()))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn format_curves(reports: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for (variant, r) in reports {
        for (i, p) in r.curve.iter().enumerate() {
            out += &format!("{variant},{},{p}\n", i + 1);
        }
    }
    out
}

pub fn format_summary(reports: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for (variant, r) in reports {
        out += &format!(
            "{variant},{},{},{},{},{}\n",
            r.trials,
            r.found,
            r.not_found,
            opt(r.avg_fixations),
            opt(r.avg_fixations_within_n_max)
        );
    }
    out
}

fn rows<'a>(text: &'a str, header: &str, source: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(TctError::parse(source, 1, format!("expected header `{header}`"))),
    }
    let width = header.split(',').count();
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != width {
                return Err(TctError::parse(
                    source,
                    i + 1,
                    format!("expected {width} fields, found {}", fields.len()),
                ));
            }
            Ok((i + 1, fields))
        })
        .collect()
}

fn field<T: std::str::FromStr>(source: &str, line: usize, what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| TctError::parse(source, line, format!("invalid {what} `{s}`")))
}

/// Curves by variant in file order. Rows of a variant must have `n = 1, 2, ...`.
pub fn parse_curves(text: &str, source: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (line, f) in rows(text, CURVE_HEADER, source)? {
        let n: usize = field(source, line, "n", f[1])?;
        let p: f64 = field(source, line, "p", f[2])?;
        if out.last().is_none_or(|(v, _)| v != f[0]) {
            if out.iter().any(|(v, _)| v == f[0]) {
                return Err(TctError::parse(source, line, format!("variant `{}` is not contiguous", f[0])));
            }
            out.push((f[0].to_string(), Vec::new()));
        }
        let curve = &mut out.last_mut().expect("pushed above").1;
        if n != curve.len() + 1 {
            return Err(TctError::parse(source, line, format!("expected n = {}, found {n}", curve.len() + 1)));
        }
        curve.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub trials: usize,
    pub found: usize,
    pub not_found: usize,
    pub avg_fixations: Option<f64>,
    pub avg_fixations_within_n_max: Option<f64>,
}

pub fn parse_summary(text: &str, source: &str) -> Result<Vec<SummaryRow>> {
    let optional = |line: usize, what: &str, s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            field(source, line, what, s).map(Some)
        }
    };
    rows(text, SUMMARY_HEADER, source)?
        .into_iter()
        .map(|(line, f)| {
            Ok(SummaryRow {
                variant: f[0].to_string(),
                trials: field(source, line, "trials", f[1])?,
                found: field(source, line, "found", f[2])?,
                not_found: field(source, line, "not_found", f[3])?,
                avg_fixations: optional(line, "avg_fixations", f[4])?,
                avg_fixations_within_n_max: optional(line, "avg_fixations_within_n_max", f[5])?,
            })
        })
        .collect()
}
