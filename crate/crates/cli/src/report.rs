//! SVG line charts from the training logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::commands::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// A parsed CSV: header names and rows of raw fields with their line numbers.
struct Table {
    columns: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn csv_error(path: &Path, line: u64, message: impl Into<String>) -> CliError {
    CliError::Csv {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_table(path: &Path, required: &[&str]) -> Result<Table> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, 0, e.to_string()))?;
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if let Some(missing) = required.iter().find(|c| !columns.iter().any(|h| h == *c)) {
        return Err(csv_error(path, 1, format!("missing column `{missing}`")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(csv_error(path, 1, "no data rows"));
    }
    Ok(Table { columns, rows })
}

impl Table {
    fn column(&self, name: &str) -> usize {
        self.columns
            .iter()
            .position(|c| c == name)
            .expect("checked on read")
    }

    fn numbers(&self, path: &Path, name: &str) -> Result<Vec<f64>> {
        let idx = self.column(name);
        self.rows
            .iter()
            .map(|(line, row)| {
                let raw = row.get(idx).map(String::as_str).unwrap_or("");
                raw.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        csv_error(
                            path,
                            *line,
                            format!("column `{name}`: `{raw}` is not a number"),
                        )
                    })
            })
            .collect()
    }

    fn strings(&self, name: &str) -> Vec<String> {
        let idx = self.column(name);
        self.rows
            .iter()
            .map(|(_, row)| row.get(idx).cloned().unwrap_or_default())
            .collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Axis {
    Left,
    Right,
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
    axis: Axis,
}

struct Chart {
    title: String,
    x_label: String,
    left: (String, f64, f64),
    right: Option<(String, f64, f64)>,
    series: Vec<Series>,
}

const W: f64 = 860.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 220.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;

fn color(i: usize, n: usize) -> String {
    format!("hsl({:.0},65%,42%)", i as f64 * 360.0 / n.max(1) as f64)
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

impl Chart {
    fn render(&self) -> String {
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let (x_lo, x_hi) = {
            let (lo, hi) = padded_range(
                self.series
                    .iter()
                    .flat_map(|s| s.points.iter().map(|p| p.0)),
            );
            if self.series.iter().all(|s| s.points.len() <= 1) {
                (lo, hi)
            } else {
                (lo.floor(), hi.ceil())
            }
        };
        let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * pw;
        let sy = |y: f64, (lo, hi): (f64, f64)| TOP + ph - (y - lo) / (hi - lo) * ph;
        let left = (self.left.1, self.left.2);
        let right = self.right.as_ref().map_or(left, |r| (r.1, r.2));

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="25" text-anchor="middle" font-size="16">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
        );
        for i in 0..=5 {
            let t = i as f64 / 5.0;
            let x = x_lo + t * (x_hi - x_lo);
            let px = sx(x);
            let _ = writeln!(
                s,
                r##"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="#ddd"/><text x="{px:.1}" y="{}" text-anchor="middle">{x:.1}</text>"##,
                TOP,
                TOP + ph,
                TOP + ph + 16.0
            );
            let yl = left.0 + t * (left.1 - left.0);
            let py = sy(yl, left);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{yl:.3}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                py + 4.0
            );
            if self.right.is_some() {
                let yr = right.0 + t * (right.1 - right.0);
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{:.1}">{yr:.3}</text>"#,
                    LEFT + pw + 6.0,
                    sy(yr, right) + 4.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 20.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(18,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + ph / 2.0,
            escape(&self.left.0)
        );
        if let Some((label, _, _)) = &self.right {
            let _ = writeln!(
                s,
                r#"<text transform="translate({},{}) rotate(90)" text-anchor="middle">{}</text>"#,
                LEFT + pw + 52.0,
                TOP + ph / 2.0,
                escape(label)
            );
        }

        let n = self.series.len();
        for (i, series) in self.series.iter().enumerate() {
            let c = color(i, n);
            let range = if series.axis == Axis::Right {
                right
            } else {
                left
            };
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y, range)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
                pts.join(" "),
                escape(&series.name)
            );
            for &(x, y) in &series.points {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}"/>"#,
                    sx(x),
                    sy(y, range)
                );
            }
            let ly = TOP + 4.0 + i as f64 * (ph / n.max(12) as f64);
            let lx = LEFT + pw + if self.right.is_some() { 70.0 } else { 12.0 };
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly:.1}" x2="{}" y2="{ly:.1}" stroke="{c}" stroke-width="2"/><text x="{}" y="{:.1}" font-size="10">{}</text>"#,
                lx + 14.0,
                lx + 18.0,
                ly + 3.5,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

pub const REPORT_FILES: [&str; 3] = [
    "layer_bitwidths.svg",
    "accuracy_bitwidth.svg",
    "loss_components.svg",
];

/// Reads the three training CSVs in `dir` and writes three SVG charts to
/// `out`. Nothing is written unless all inputs parse.
pub fn emit_report(dir: &Path, out: &Path) -> Result<()> {
    let metrics_path = dir.join("metrics.csv");
    let layers_path = dir.join("layer_bitwidths.csv");
    let losses_path = dir.join("loss_components.csv");

    let metrics = read_table(&metrics_path, &["epoch", "val_accuracy", "avg_bitwidth"])?;
    let epochs = metrics.numbers(&metrics_path, "epoch")?;
    let accuracy = metrics.numbers(&metrics_path, "val_accuracy")?;
    let avg_bits = metrics.numbers(&metrics_path, "avg_bitwidth")?;

    let layers = read_table(&layers_path, &["epoch", "layer", "bitwidth"])?;
    let layer_epochs = layers.numbers(&layers_path, "epoch")?;
    let layer_bits = layers.numbers(&layers_path, "bitwidth")?;
    let mut per_layer: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for ((name, e), b) in layers
        .strings("layer")
        .into_iter()
        .zip(layer_epochs)
        .zip(layer_bits)
    {
        let i = *index.entry(name.clone()).or_insert_with(|| {
            per_layer.push((name, Vec::new()));
            per_layer.len() - 1
        });
        per_layer[i].1.push((e, b));
    }

    let losses = read_table(&losses_path, &["epoch", "bce", "dice", "bitwidth_term"])?;
    let loss_epochs = losses.numbers(&losses_path, "epoch")?;
    let loss_series: Vec<Series> = ["bce", "dice", "bitwidth_term"]
        .iter()
        .map(|&c| {
            Ok(Series {
                name: c.to_string(),
                points: loss_epochs
                    .iter()
                    .copied()
                    .zip(losses.numbers(&losses_path, c)?)
                    .collect(),
                axis: Axis::Left,
            })
        })
        .collect::<Result<_>>()?;

    let bits_range = padded_range(per_layer.iter().flat_map(|l| l.1.iter().map(|p| p.1)));
    let charts = [
        Chart {
            title: "Per-layer weight bitwidth".into(),
            x_label: "epoch".into(),
            left: ("bitwidth".into(), bits_range.0, bits_range.1),
            right: None,
            series: per_layer
                .into_iter()
                .map(|(name, points)| Series {
                    name,
                    points,
                    axis: Axis::Left,
                })
                .collect(),
        },
        {
            let acc = padded_range(accuracy.iter().copied());
            let bits = padded_range(avg_bits.iter().copied());
            Chart {
                title: "Validation accuracy and average bitwidth".into(),
                x_label: "epoch".into(),
                left: ("val accuracy".into(), acc.0, acc.1),
                right: Some(("avg bitwidth".into(), bits.0, bits.1)),
                series: vec![
                    Series {
                        name: "val_accuracy".into(),
                        points: epochs.iter().copied().zip(accuracy).collect(),
                        axis: Axis::Left,
                    },
                    Series {
                        name: "avg_bitwidth".into(),
                        points: epochs.iter().copied().zip(avg_bits).collect(),
                        axis: Axis::Right,
                    },
                ],
            }
        },
        {
            let r = padded_range(
                loss_series
                    .iter()
                    .flat_map(|s| s.points.iter().map(|p| p.1)),
            );
            Chart {
                title: "Training loss components".into(),
                x_label: "epoch".into(),
                left: ("loss".into(), r.0, r.1),
                right: None,
                series: loss_series,
            }
        },
    ];

    std::fs::create_dir_all(out)?;
    for (name, chart) in REPORT_FILES.iter().zip(charts) {
        std::fs::write(out.join(name), chart.render())?;
    }
    println!("wrote {} charts to {}", REPORT_FILES.len(), out.display());
    Ok(())
}
