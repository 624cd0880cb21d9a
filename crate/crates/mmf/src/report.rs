//! Tab-separated evaluation reports: one row per (method, episode) plus one
//! aggregate row per method.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mmf_core::metatrain::{standard_error, EvalReport};

use crate::error::{Error, Result};
use crate::num::fmt_f64;

pub const HEADER: &str = "method\tdataset\tepisode\ttest_mse\tstderr\ttrain_mse";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Episode(usize),
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub scope: Scope,
    pub test_mse: f64,
    /// Only set on aggregate rows.
    pub stderr: Option<f64>,
    pub train_mse: f64,
}

/// Per-episode rows followed by the aggregate row.
pub fn rows_for(method: &str, dataset: &str, report: &EvalReport) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = report
        .scores
        .iter()
        .enumerate()
        .map(|(i, s)| ReportRow {
            method: method.into(),
            dataset: dataset.into(),
            scope: Scope::Episode(i),
            test_mse: s.test_mse,
            stderr: None,
            train_mse: s.train_mse,
        })
        .collect();
    rows.push(ReportRow {
        method: method.into(),
        dataset: dataset.into(),
        scope: Scope::Mean,
        test_mse: report.mean_test(),
        stderr: Some(report.stderr_test()),
        train_mse: report.mean_train(),
    });
    rows
}

pub fn render(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{HEADER}").unwrap();
    for r in rows {
        let scope = match r.scope {
            Scope::Episode(i) => i.to_string(),
            Scope::Mean => "mean".into(),
        };
        let stderr = r.stderr.map_or_else(|| "-".into(), fmt_f64);
        writeln!(s, "{}\t{}\t{scope}\t{}\t{stderr}\t{}", r.method, r.dataset, fmt_f64(r.test_mse), fmt_f64(r.train_mse))
            .unwrap();
    }
    s
}

pub fn write(path: &Path, rows: &[ReportRow]) -> Result<()> {
    fs::write(path, render(rows)).map_err(Error::io(path))
}

pub fn parse(path: &Path, text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        _ => return Err(Error::Format { path: path.to_path_buf(), message: "missing report header".into() }),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: path.to_path_buf(), line: idx + 1, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |raw: &str, what: &str| raw.parse::<f64>().map_err(|_| err(format!("bad {what} {raw:?}")));
        let scope = match f[2] {
            "mean" => Scope::Mean,
            raw => Scope::Episode(raw.parse().map_err(|_| err(format!("bad episode {raw:?}")))?),
        };
        let stderr = match f[4] {
            "-" => None,
            raw => Some(num(raw, "stderr")?),
        };
        rows.push(ReportRow {
            method: f[0].into(),
            dataset: f[1].into(),
            scope,
            test_mse: num(f[3], "test_mse")?,
            stderr,
            train_mse: num(f[5], "train_mse")?,
        });
    }
    Ok(rows)
}

pub fn read(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse(path, &text)
}

/// Aggregate line of a summary, recomputed from the per-episode rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryLine {
    pub dataset: String,
    pub method: String,
    pub episodes: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Episodes where the reference method has strictly lower error, when a
    /// reference with matching episodes is present.
    pub reference_wins: Option<usize>,
}

fn key(r: &ReportRow) -> (&str, &str) {
    (&r.dataset, &r.method)
}

/// The reference for `method@setting` is `reference@setting` when present,
/// else plain `reference`.
fn reference_for<'a>(method: &str, reference: &str, present: impl Fn(&str) -> bool) -> Option<String> {
    let candidate = match method.split_once('@') {
        Some((_, setting)) if present(&format!("{reference}@{setting}")) => format!("{reference}@{setting}"),
        _ => reference.to_string(),
    };
    (candidate != method && present(&candidate)).then_some(candidate)
}

/// One line per (dataset, method) in order of first appearance.
pub fn summarize(rows: &[ReportRow], reference: &str) -> Vec<SummaryLine> {
    let mut groups: Vec<((String, String), Vec<(usize, f64)>)> = Vec::new();
    for r in rows {
        let Scope::Episode(i) = r.scope else { continue };
        match groups.iter_mut().find(|(k, _)| (k.0.as_str(), k.1.as_str()) == key(r)) {
            Some((_, v)) => v.push((i, r.test_mse)),
            None => groups.push(((r.dataset.clone(), r.method.clone()), vec![(i, r.test_mse)])),
        }
    }
    let lookup = |dataset: &str, method: &str| groups.iter().find(|(k, _)| k.0 == dataset && k.1 == method).map(|(_, v)| v);
    groups
        .iter()
        .map(|((dataset, method), values)| {
            let mse: Vec<f64> = values.iter().map(|&(_, v)| v).collect();
            let reference_wins = reference_for(method, reference, |m| lookup(dataset, m).is_some()).and_then(|r| {
                let refs = lookup(dataset, &r)?;
                let mut wins = 0;
                for &(i, v) in values {
                    let &(_, rv) = refs.iter().find(|&&(j, _)| j == i)?;
                    wins += usize::from(rv < v);
                }
                Some(wins)
            });
            SummaryLine {
                dataset: dataset.clone(),
                method: method.clone(),
                episodes: mse.len(),
                mean: mse.iter().sum::<f64>() / mse.len() as f64,
                stderr: standard_error(&mse),
                reference_wins,
            }
        })
        .collect()
}

pub fn render_summary(lines: &[SummaryLine], reference: &str) -> String {
    let width = lines.iter().map(|l| l.method.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    writeln!(s, "{:<12} {:<width$} {:>4} {:>10} {:>10} {:>8}", "dataset", "method", "n", "mse", "stderr", format!("{reference}<")).unwrap();
    for l in lines {
        let wins = l.reference_wins.map_or_else(|| "-".into(), |w| format!("{w}/{}", l.episodes));
        writeln!(s, "{:<12} {:<width$} {:>4} {:>10.4} {:>10.4} {:>8}", l.dataset, l.method, l.episodes, l.mean, l.stderr, wins)
            .unwrap();
    }
    s
}
