//! Training curves from the metrics log, drawn as a hand-written SVG.

use std::fmt::Write;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "step,loss_total,loss_classtoken,loss_season,loss_patch,teacher_entropy,lr";

/// One numeric column: `(step, value)` points in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Parses a metrics CSV whose first column is `step`. Empty cells are
/// skipped; anything else that is not a number is an error naming the line.
pub fn parse_metrics(text: &str) -> Result<Vec<Series>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data("metrics CSV is empty".into()))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names.first() != Some(&"step") || names.len() < 2 {
        return Err(Error::Data(format!(
            "line 1: expected a header starting with `step`, got {header:?}"
        )));
    }
    let mut series: Vec<Series> = names[1..]
        .iter()
        .map(|n| Series {
            name: n.to_string(),
            points: Vec::new(),
        })
        .collect();
    for (i, line) in lines {
        let lineno = i + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() > names.len() {
            return Err(Error::Data(format!(
                "line {lineno}: {} fields for {} columns",
                cells.len(),
                names.len()
            )));
        }
        let parse = |s: &str, col: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "line {lineno}: column {col}: {s:?} is not a number"
                    ))
                })
        };
        let step = parse(cells[0], "step")?;
        for (j, cell) in cells.iter().enumerate().skip(1) {
            if !cell.is_empty() {
                series[j - 1].points.push((step, parse(cell, names[j])?));
            }
        }
    }
    series.retain(|s| !s.points.is_empty());
    Ok(series)
}

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 140.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_T: f64 = 30.0;
const GAP: f64 = 40.0;

/// Maps a value to panel pixels; larger values are drawn higher.
fn scale(v: f64, lo: f64, hi: f64, len: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo) * len
    } else {
        len / 2.0
    }
}

/// One stacked panel per series, each with its own value axis.
pub fn emit_curves(series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Data("no numeric columns to plot".into()));
    }
    let width = MARGIN_L + PANEL_W + 20.0;
    let height = MARGIN_T + series.len() as f64 * (PANEL_H + GAP) + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, ser) in series.iter().enumerate() {
        let top = MARGIN_T + i as f64 * (PANEL_H + GAP);
        let bottom = top + PANEL_H;
        let (x0, x1) = ser
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.0), b.max(p.0))
            });
        let (y0, y1) = ser
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.1), b.max(p.1))
            });
        let _ = writeln!(s, r#"<g class="series" data-name="{}">"#, ser.name);
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN_L}" y="{}" font-weight="bold">{}</text>"#,
            top - 8.0,
            ser.name
        );
        let _ = writeln!(
            s,
            r#"<path d="M{MARGIN_L},{top} V{bottom} H{}" fill="none" stroke="black"/>"#,
            MARGIN_L + PANEL_W
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_L - 4.0,
            top + 4.0,
            fmt_tick(y1)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{bottom}" text-anchor="end">{}</text>"#,
            MARGIN_L - 4.0,
            fmt_tick(y0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN_L}" y="{}">{}</text>"#,
            bottom + 14.0,
            fmt_tick(x0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_L + PANEL_W,
            bottom + 14.0,
            fmt_tick(x1)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
            MARGIN_L + PANEL_W / 2.0,
            bottom + 14.0
        );
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    MARGIN_L + scale(x, x0, x1, PANEL_W),
                    bottom - scale(y, y0, y1, PANEL_H)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            colour(i),
            pts.join(" ")
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.3e}")
    } else {
        format!("{}", (v * 1e4).round() / 1e4)
    }
}

fn colour(i: usize) -> &'static str {
    [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf",
    ][i % 7]
}
