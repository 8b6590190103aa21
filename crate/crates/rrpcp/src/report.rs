//! Per-frame evaluation rows, their CSV round-trip, and run summaries.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Per-frame accuracy and diagnostic record, one CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// 1-based frame number.
    pub frame: usize,
    /// ‖Ŝ − S‖₂/‖S‖₂, absent when the true sparse part is all-zero.
    pub rel_err_s: Option<f64>,
    /// Predicted-support pixels outside the true support.
    pub extras_pred: usize,
    /// True-support pixels missed by the predicted support.
    pub misses_pred: usize,
    /// Updated-support pixels outside the true support.
    pub extras_upd: usize,
    /// True-support pixels missed by the updated support.
    pub misses_upd: usize,
    /// ‖L̂ − L‖₂/‖L‖₂.
    pub rel_err_l: f64,
    /// Background subspace rank in effect for this frame.
    pub rank: usize,
    /// Iterations spent by the sparse solver on this frame.
    pub solver_iters: usize,
    /// Data-fit radius used for this frame.
    pub epsilon: f64,
    /// Whether the true sparse part is all-zero this frame.
    pub s_zero: bool,
}

/// Column order of the metrics CSV.
pub const CSV_HEADER: &str =
    "frame,rel_err_s,extras_pred,misses_pred,extras_upd,misses_upd,rel_err_l,rank,solver_iters,epsilon,s_zero";

/// Writes rows with a header line. Floats use shortest round-trip formatting,
/// so equal runs produce byte-identical files.
pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for row in rows {
        let rel_err_s = match row.rel_err_s {
            Some(v) => format!("{v}"),
            None => String::new(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.frame,
            rel_err_s,
            row.extras_pred,
            row.misses_pred,
            row.extras_upd,
            row.misses_upd,
            row.rel_err_l,
            row.rank,
            row.solver_iters,
            row.epsilon,
            row.s_zero,
        )?;
    }
    Ok(())
}

/// Reads rows produced by [`write_metrics_csv`].
pub fn read_metrics_csv<R: BufRead>(input: R) -> Result<Vec<MetricsRow>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty metrics file".into()))??;
    if header.trim() != CSV_HEADER {
        return Err(Error::Format(format!("unexpected metrics header: {header}")));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Format(format!(
                "line {}: expected 11 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_usize = |s: &str, name: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("line {}: bad {name}: {s:?}", lineno + 2)))
        };
        let parse_f64 = |s: &str, name: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("line {}: bad {name}: {s:?}", lineno + 2)))
        };
        rows.push(MetricsRow {
            frame: parse_usize(fields[0], "frame")?,
            rel_err_s: if fields[1].is_empty() {
                None
            } else {
                Some(parse_f64(fields[1], "rel_err_s")?)
            },
            extras_pred: parse_usize(fields[2], "extras_pred")?,
            misses_pred: parse_usize(fields[3], "misses_pred")?,
            extras_upd: parse_usize(fields[4], "extras_upd")?,
            misses_upd: parse_usize(fields[5], "misses_upd")?,
            rel_err_l: parse_f64(fields[6], "rel_err_l")?,
            rank: parse_usize(fields[7], "rank")?,
            solver_iters: parse_usize(fields[8], "solver_iters")?,
            epsilon: parse_f64(fields[9], "epsilon")?,
            s_zero: match fields[10] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::Format(format!(
                        "line {}: bad s_zero: {other:?}",
                        lineno + 2
                    )))
                }
            },
        });
    }
    Ok(rows)
}

/// Aggregates of one run, over frames with a nonzero true sparse part.
#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Frames contributing to the sparse-error statistics.
    pub active_frames: usize,
    pub median_rel_err_s: f64,
    pub p90_rel_err_s: f64,
    pub median_rel_err_l: f64,
    pub median_pred_support_errors: f64,
    pub median_upd_support_errors: f64,
    pub mean_solver_iters: f64,
    pub final_rank: usize,
}

/// Median of a sample; NaN on empty input.
pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = rank - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Summarizes one run's rows.
pub fn summarize(rows: &[MetricsRow]) -> RunSummary {
    let active: Vec<&MetricsRow> = rows.iter().filter(|r| !r.s_zero).collect();
    let rel_s: Vec<f64> = active.iter().filter_map(|r| r.rel_err_s).collect();
    let rel_l: Vec<f64> = rows.iter().map(|r| r.rel_err_l).collect();
    let pred_errors: Vec<f64> = active
        .iter()
        .map(|r| (r.extras_pred + r.misses_pred) as f64)
        .collect();
    let upd_errors: Vec<f64> = active
        .iter()
        .map(|r| (r.extras_upd + r.misses_upd) as f64)
        .collect();
    let iters: Vec<f64> = rows.iter().map(|r| r.solver_iters as f64).collect();
    RunSummary {
        active_frames: active.len(),
        median_rel_err_s: median(&rel_s),
        p90_rel_err_s: percentile(&rel_s, 90.0),
        median_rel_err_l: median(&rel_l),
        median_pred_support_errors: median(&pred_errors),
        median_upd_support_errors: median(&upd_errors),
        mean_solver_iters: if iters.is_empty() {
            f64::NAN
        } else {
            iters.iter().sum::<f64>() / iters.len() as f64
        },
        final_rank: rows.last().map_or(0, |r| r.rank),
    }
}

/// Renders per-frame columns of several runs side by side as aligned text,
/// one line per frame: `frame` then one value column per named series.
pub fn column_table(names: &[&str], series: &[Vec<f64>]) -> Result<String> {
    if names.len() != series.len() {
        return Err(Error::dim("column_table series", names.len(), series.len()));
    }
    let frames = series.first().map_or(0, |s| s.len());
    if series.iter().any(|s| s.len() != frames) {
        return Err(Error::invalid("column_table series lengths differ"));
    }
    let mut out = String::new();
    out.push_str("frame");
    for name in names {
        out.push(' ');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..frames {
        out.push_str(&format!("{}", t + 1));
        for s in series {
            out.push_str(&format!(" {}", s[t]));
        }
        out.push('\n');
    }
    Ok(out)
}
