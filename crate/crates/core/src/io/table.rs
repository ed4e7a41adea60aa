//! Result tables as CSV and line plots as SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::ResultRow;

pub const CSV_HEADER: [&str; 8] = [
    "experiment",
    "series",
    "spec",
    "axis",
    "x",
    "metric",
    "value",
    "samples",
];

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        return Err(Error::Format(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty("result table"));
    }
    std::fs::write(path, rows_to_csv(rows)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Collects `(x, value)` points per series for one metric, skipping empty
/// values. Series keep their first-appearance order.
pub fn series_for_metric(rows: &[ResultRow], metric: &str) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        let Some(v) = r.value else { continue };
        match out.iter_mut().find(|s| s.name == r.series) {
            Some(s) => s.points.push((r.x, v)),
            None => out.push(Series {
                name: r.series.clone(),
                points: vec![(r.x, v)],
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Fixed y range; derived from the data when absent.
    pub y_range: Option<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// SVG line plot with axes, one polyline per series and a legend.
pub fn svg_lineplot(plot: &PlotSpec, series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Empty("plot series"));
    }
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = plot
        .y_range
        .unwrap_or_else(|| range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&plot.title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        TOP + ph
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            sx(xv),
            TOP + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&plot.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&plot.y_label)
    );
    for (i, line) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = line
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&line.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

pub fn write_svg(path: &Path, plot: &PlotSpec, series: &[Series]) -> Result<()> {
    std::fs::write(path, svg_lineplot(plot, series)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(series: &str, x: f64, value: Option<f64>) -> ResultRow {
        ResultRow {
            experiment: "bias_sweep".into(),
            series: series.into(),
            spec: "mean_color(0.5,0.5,0.5)".into(),
            axis: "fraction".into(),
            x,
            metric: "keep_fraction".into(),
            value,
            samples: 10,
        }
    }

    #[test]
    fn single_row_csv_has_two_lines() {
        let bytes = rows_to_csv(&[row("random", 0.5, Some(0.25))]).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            "experiment,series,spec,axis,x,metric,value,samples"
        );
        assert_eq!(
            rows_from_csv(&bytes).unwrap(),
            vec![row("random", 0.5, Some(0.25))]
        );
    }

    #[test]
    fn empty_value_round_trips() {
        let rows = vec![row("random", 0.0, None), row("random", 0.1, Some(1.0))];
        let bytes = rows_to_csv(&rows).unwrap();
        assert!(String::from_utf8(bytes.clone())
            .unwrap()
            .contains(",keep_fraction,,10"));
        assert_eq!(rows_from_csv(&bytes).unwrap(), rows);
    }

    #[test]
    fn two_series_two_polylines_in_range() {
        let rows: Vec<ResultRow> = (0..10)
            .flat_map(|i| {
                let x = i as f64 / 10.0;
                [row("a", x, Some(1.0 - x)), row("b", x, Some(x * x))]
            })
            .collect();
        let series = series_for_metric(&rows, "keep_fraction");
        let plot = PlotSpec {
            title: "keep".into(),
            x_label: "fraction".into(),
            y_label: "keep fraction".into(),
            y_range: Some((0.0, 1.0)),
        };
        let svg = svg_lineplot(&plot, &series).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg, svg_lineplot(&plot, &series).unwrap());
        for poly in svg.lines().filter(|l| l.starts_with("<polyline")) {
            let pts = poly
                .split("points=\"")
                .nth(1)
                .unwrap()
                .trim_end_matches("\"/>");
            for p in pts.split(' ') {
                let y: f64 = p.split(',').nth(1).unwrap().parse().unwrap();
                assert!((TOP - 1e-9..=HEIGHT - BOTTOM + 1e-9).contains(&y));
            }
        }
    }
}
