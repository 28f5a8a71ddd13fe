//! SVG plots of test accuracy against epoch, one file per (degree, probe).
//!
//! Each layer gets a mean line over seeds with a min-max band, and the
//! model's own accuracy is drawn dotted for reference. The plotted numbers
//! are embedded as comments so a figure can be checked against the metrics
//! file. Output is byte-for-byte deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::harness::{aggregate, AggregateRow, HarnessError, Intervention, MetricsRow};
use crate::probes::ProbeKind;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
struct Series {
    label: String,
    /// (epoch, mean, min, max)
    points: Vec<(usize, f64, f64, f64)>,
}

fn series_of(agg: &[AggregateRow], degree: f64, probe: Option<ProbeKind>) -> Vec<Series> {
    let mut by_layer: BTreeMap<String, Vec<(usize, f64, f64, f64)>> = BTreeMap::new();
    for r in agg
        .iter()
        .filter(|r| r.degree == degree && r.probe == probe && r.intervention == Intervention::None)
    {
        let label = r.layer.clone().unwrap_or_else(|| "model".into());
        by_layer.entry(label).or_default().push((r.epoch, r.mean, r.min, r.max));
    }
    by_layer
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by_key(|p| p.0);
            Series { label, points }
        })
        .collect()
}

/// One figure. `None` if there are no rows for this probe at this degree.
pub fn render_svg(rows: &[MetricsRow], degree: f64, probe: ProbeKind) -> Option<String> {
    let agg = aggregate(rows);
    let layers = series_of(&agg, degree, Some(probe));
    if layers.is_empty() {
        return None;
    }
    let model = series_of(&agg, degree, None);
    let max_epoch = layers
        .iter()
        .chain(&model)
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let x = |e: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * e as f64 / max_epoch;
    let y = |a: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * a.clamp(0.0, 1.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, "<!-- degree={degree} probe={} -->", probe.name());
    for series in layers.iter().chain(&model) {
        for (e, mean, lo, hi) in &series.points {
            let _ = writeln!(s, "<!-- {} epoch={e} mean={mean:.6} min={lo:.6} max={hi:.6} -->", series.label);
        }
    }
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    // axes and gridlines at 0, 0.25, ..., 1
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#ddd"/><text x="{2:.2}" y="{3:.2}" font-size="10" text-anchor="end">{a:.2}</text>"##,
            y(a),
            WIDTH - MARGIN,
            MARGIN - 4.0,
            y(a) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">epoch (0 to {max_epoch})</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" font-size="13" text-anchor="middle">{} test accuracy, corruption {degree}</text>"#,
        WIDTH / 2.0,
        probe.name()
    );

    let path_of = |pts: &[(usize, f64)]| -> String {
        pts.iter()
            .enumerate()
            .map(|(i, (e, a))| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, x(*e), y(*a)))
            .collect()
    };
    for (i, series) in layers.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let band: Vec<String> = series
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.0), y(p.3)))
            .chain(series.points.iter().rev().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.2))))
            .collect();
        let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, band.join(" "));
        let mean: Vec<(usize, f64)> = series.points.iter().map(|p| (p.0, p.1)).collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path_of(&mean));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" fill="{color}">{}</text>"#,
            WIDTH - MARGIN + 4.0,
            MARGIN + 14.0 * i as f64,
            series.label
        );
    }
    for series in &model {
        let mean: Vec<(usize, f64)> = series.points.iter().map(|p| (p.0, p.1)).collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="black" stroke-width="1.5" stroke-dasharray="2,3"/>"#,
            path_of(&mean)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10">model</text>"#,
            WIDTH - MARGIN + 4.0,
            MARGIN + 14.0 * layers.len() as f64
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Writes `acc_p{degree}_{probe}.svg` for every (degree, probe) present in
/// `rows` and returns the paths in a stable order.
pub fn write_report(rows: &[MetricsRow], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut figures: BTreeMap<(u64, ProbeKind), f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.intervention == Intervention::None) {
        if let Some(p) = r.probe {
            figures.insert((r.degree.to_bits(), p), r.degree);
        }
    }
    let mut written = Vec::new();
    for ((_, probe), degree) in figures {
        if let Some(svg) = render_svg(rows, degree, probe) {
            let path = dir.join(format!("acc_p{degree:.2}_{}.svg", probe.name()));
            std::fs::write(&path, svg).map_err(|source| HarnessError::Io {
                path: path.display().to_string(),
                source,
            })?;
            written.push(path);
        }
    }
    Ok(written)
}
