//! Deterministic SVG line plots drawn from experiment CSVs. Every number in
//! the output comes from the CSV; nothing time- or host-dependent is
//! written, so equal input gives equal bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Test top-1 against training keep rate (`keep_rate`, `test_top1`).
    KeepRateCurve,
    /// One line per training rate: top-1 against eval keep rate
    /// (`train_rate`, `eval_rate`, `top1`).
    Robustness,
    /// Relative compute against patch count, one line per keep rate, with
    /// dashed guides at `r` and `r²` (`keep_rate`, `N`, `relative_theoretical`).
    Savings,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [
        PlotKind::KeepRateCurve,
        PlotKind::Robustness,
        PlotKind::Savings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::KeepRateCurve => "keep_rate_curve",
            PlotKind::Robustness => "robustness",
            PlotKind::Savings => "savings",
        }
    }

    pub fn required_columns(self) -> &'static [&'static str] {
        match self {
            PlotKind::KeepRateCurve => &["keep_rate", "test_top1"],
            PlotKind::Robustness => &["train_rate", "eval_rate", "top1"],
            PlotKind::Savings => &["keep_rate", "N", "relative_theoretical"],
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown plot kind {s:?}")))
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

/// Reads the named numeric columns from every data row.
fn numeric_columns(csv_text: &str, columns: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(csv_text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?
        .clone();
    let idx = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::SchemaMismatch(format!("missing column {c:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        // Failed experiment cells leave their metrics empty.
        if idx.iter().any(|&i| rec.get(i).is_none_or(str::is_empty)) {
            continue;
        }
        let row = idx
            .iter()
            .zip(columns)
            .map(|(&i, c)| {
                let cell = rec.get(i).unwrap_or("");
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::SchemaMismatch(format!(
                            "row {}: {c}={cell:?} is not a number",
                            n + 1
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::SchemaMismatch("no data rows".into()));
    }
    Ok(rows)
}

/// Groups `(key, x, y)` rows into series keyed by `key`, points sorted by x.
fn group(rows: &[Vec<f64>], label: impl Fn(f64) -> String) -> Vec<Series> {
    let mut by_key: BTreeMap<u64, (f64, Vec<(f64, f64)>)> = BTreeMap::new();
    for r in rows {
        by_key
            .entry(r[0].to_bits())
            .or_insert((r[0], Vec::new()))
            .1
            .push((r[1], r[2]));
    }
    let mut keys: Vec<_> = by_key.into_values().collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0));
    keys.into_iter()
        .map(|(k, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label: label(k),
                points,
            }
        })
        .collect()
}

/// Renders `csv_text` as an SVG plot of the given kind.
pub fn emit_plot(csv_text: &str, kind: PlotKind) -> Result<String> {
    let rows = numeric_columns(csv_text, kind.required_columns())?;
    let mut guides = Vec::new();
    let (series, title, xlabel, ylabel, log_x) = match kind {
        PlotKind::KeepRateCurve => {
            let mut points: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let s = vec![Series {
                label: "test top-1".into(),
                points,
            }];
            (s, "Accuracy vs keep rate", "keep rate", "top-1", false)
        }
        PlotKind::Robustness => {
            let s = group(&rows, |k| format!("trained at r={k}"));
            (
                s,
                "Robustness to test-time patch dropout",
                "eval keep rate",
                "top-1",
                false,
            )
        }
        PlotKind::Savings => {
            let rows: Vec<Vec<f64>> = rows.into_iter().filter(|r| r[0] < 1.0).collect();
            if rows.is_empty() {
                return Err(Error::SchemaMismatch("no keep rate below 1".into()));
            }
            let mut rates: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            rates.sort_by(|a, b| b.total_cmp(a));
            rates.dedup();
            for r in rates {
                guides.push((r, format!("r={}", fmt_num(r))));
                guides.push((r * r, format!("r²={}", fmt_num(r * r))));
            }
            let s = group(&rows, |k| format!("r={}", fmt_num(k)));
            (
                s,
                "Relative compute vs patch count",
                "patches N",
                "relative compute",
                true,
            )
        }
    };
    Ok(render(&series, &guides, title, xlabel, ylabel, log_x))
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#2ca02c", "#d62728", "#ff7f0e", "#9467bd", "#8c564b",
];

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn render(
    series: &[Series],
    guides: &[(f64, String)],
    title: &str,
    xlabel: &str,
    ylabel: &str,
    log_x: bool,
) -> String {
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0)));
    let ys = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .chain(guides.iter().map(|g| g.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    y0 = y0.min(0.0);
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut o = String::new();
    writeln!(o, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(o, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        o,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(o, r#"<g class="axes" stroke="black" fill="none"><line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/></g>"#, TOP + ph, LEFT + pw, TOP + ph, TOP + ph).unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let xv = if log_x { 10f64.powf(xv) } else { xv };
        let yv = y0 + f * (y1 - y0);
        let (sx, sy) = (px(xv), py(yv));
        writeln!(o, r#"<line x1="{sx:.2}" y1="{}" x2="{sx:.2}" y2="{}" stroke="black"/><text x="{sx:.2}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph, TOP + ph + 5.0, TOP + ph + 18.0, fmt_num(xv)).unwrap();
        writeln!(o, r#"<line x1="{}" y1="{sy:.2}" x2="{LEFT}" y2="{sy:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 5.0, LEFT - 8.0, sy + 4.0, fmt_num(yv)).unwrap();
    }
    writeln!(
        o,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 14.0,
        escape(xlabel)
    )
    .unwrap();
    writeln!(
        o,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(ylabel)
    )
    .unwrap();

    for (y, label) in guides {
        let sy = py(*y);
        writeln!(o, r##"<g class="guide"><line x1="{LEFT}" y1="{sy:.2}" x2="{}" y2="{sy:.2}" stroke="#999" stroke-dasharray="4 3"/><text x="{}" y="{:.2}" fill="#666" font-size="10">{}</text></g>"##, LEFT + pw, LEFT + pw + 4.0, sy + 3.0, escape(label)).unwrap();
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        writeln!(o, r#"<g class="series" stroke="{color}" fill="{color}">"#).unwrap();
        writeln!(
            o,
            r#"<polyline fill="none" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        for &(x, y) in &s.points {
            writeln!(
                o,
                r#"<circle class="pt" cx="{:.2}" cy="{:.2}" r="3.5"/>"#,
                px(x),
                py(y)
            )
            .unwrap();
        }
        writeln!(o, "</g>").unwrap();
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 46.0;
        writeln!(o, r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#, lx + 18.0, lx + 24.0, ly + 4.0, escape(&s.label)).unwrap();
    }
    o.push_str("</svg>\n");
    o
}
