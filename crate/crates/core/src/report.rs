//! Deterministic report directory: surface.json, scores.csv,
//! ablations/*.csv, plots/*.svg, manifest.json. No timestamps anywhere, so
//! a rerun with the same inputs is byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::attribution::ScoreMatrix;
use crate::error::Result;
use crate::pruning::GridSearchResult;
use crate::util::atomic_write;

pub const SVG_WIDTH: f64 = 800.0;
pub const SVG_HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Fixed-precision coordinate so the text form is a pure function of the
/// value (never locale- or platform-dependent).
fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Multi-series line chart in a fixed 800x500 viewbox.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x0, x1) = span(pts.iter().map(|p| p.0));
    let (y0, y1) = span(pts.iter().map(|p| p.1));
    let plot_w = SVG_WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = SVG_HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |v: f64| MARGIN_L + (v - x0) / (x1 - x0) * plot_w;
    let sy = |v: f64| MARGIN_T + plot_h - (v - y0) / (y1 - y0) * plot_h;

    let mut svg = header(title, xlabel, ylabel);
    axes(&mut svg, x0, x1, y0, y1, &sx, &sy);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y))))
            .collect();
        let _ = writeln!(
            svg,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                "  <circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>",
                fmt(sx(x)),
                fmt(sy(y))
            );
        }
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            fmt(SVG_WIDTH - MARGIN_R - 120.0),
            fmt(MARGIN_T + 16.0 * (i as f64 + 1.0)),
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Categorical bar chart in the same viewbox.
pub fn bar_chart(title: &str, xlabel: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let (y0, y1) = span(bars.iter().map(|b| b.1).chain(std::iter::once(0.0)));
    let plot_w = SVG_WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = SVG_HEIGHT - MARGIN_T - MARGIN_B;
    let sy = |v: f64| MARGIN_T + plot_h - (v - y0) / (y1 - y0) * plot_h;
    let n = bars.len().max(1) as f64;
    let slot = plot_w / n;
    let bw = slot * 0.6;

    let mut svg = header(title, xlabel, ylabel);
    axes(&mut svg, 0.0, n, y0, y1, &|v| MARGIN_L + v / n * plot_w, &sy);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN_L + slot * (i as f64 + 0.2);
        let top = sy(v.max(0.0));
        let h = (sy(v.min(0.0).max(y0)) - top).abs();
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>",
            fmt(x),
            fmt(top),
            fmt(bw),
            fmt(h)
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            fmt(x + bw / 2.0),
            fmt(SVG_HEIGHT - MARGIN_B + 18.0),
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        // degenerate span: pad so scaling never divides by zero
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\">",
        SVG_WIDTH as u32, SVG_HEIGHT as u32
    );
    let _ = writeln!(
        svg,
        "  <rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>",
        SVG_WIDTH as u32, SVG_HEIGHT as u32
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        fmt(SVG_WIDTH / 2.0),
        escape(title)
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
        fmt(SVG_WIDTH / 2.0),
        fmt(SVG_HEIGHT - 12.0),
        escape(xlabel)
    );
    let _ = writeln!(
        svg,
        "  <text x=\"18\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        fmt(SVG_HEIGHT / 2.0),
        fmt(SVG_HEIGHT / 2.0),
        escape(ylabel)
    );
    svg
}

fn axes(
    svg: &mut String,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    sx: &dyn Fn(f64) -> f64,
    sy: &dyn Fn(f64) -> f64,
) {
    let _ = writeln!(
        svg,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(SVG_HEIGHT - MARGIN_B)
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_L),
        fmt(SVG_HEIGHT - MARGIN_B),
        fmt(SVG_WIDTH - MARGIN_R),
        fmt(SVG_HEIGHT - MARGIN_B)
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            fmt(sx(fx)),
            fmt(SVG_HEIGHT - MARGIN_B + 16.0),
            fmt_tick(fx)
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            fmt(MARGIN_L - 6.0),
            fmt(sy(fy) + 4.0),
            fmt_tick(fy)
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 && v.abs() < 1e9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Everything a report directory is built from. `ablations` maps file stem →
/// CSV body; `manifest` holds input hashes, seeds, and flags (BTreeMap keeps
/// JSON key order stable).
pub struct ReportContext {
    pub scores: ScoreMatrix,
    pub grid: GridSearchResult,
    pub ablations: BTreeMap<String, String>,
    pub manifest: BTreeMap<String, serde_json::Value>,
}

/// An ablation CSV becomes a plot when its data rows are numeric (line
/// chart on the first two numeric columns) or categorical-then-numeric
/// (bar chart). Rows that fit neither shape (e.g. `mean,…` footers) are
/// skipped.
fn plot_from_csv(stem: &str, csv: &str) -> Option<String> {
    let mut lines = csv.lines();
    let head: Vec<&str> = lines.next()?.split(',').collect();
    if head.len() < 2 {
        return None;
    }
    let ycol = head.len() - 1;
    let mut numeric: Vec<(f64, f64)> = Vec::new();
    let mut cats: Vec<(String, f64)> = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != head.len() {
            continue;
        }
        let y: f64 = match cols[ycol].parse() {
            Ok(v) => v,
            Err(_) => continue,
        };
        match cols[0].parse::<f64>() {
            Ok(x) => numeric.push((x, y)),
            Err(_) => cats.push((cols[0].to_string(), y)),
        }
    }
    let ylabel = head[ycol];
    if !numeric.is_empty() && cats.is_empty() {
        Some(line_chart(
            stem,
            head[0],
            ylabel,
            &[Series { label: ylabel.to_string(), points: numeric }],
        ))
    } else if !cats.is_empty() {
        Some(bar_chart(stem, head[0], ylabel, &cats))
    } else {
        None
    }
}

/// Accuracy surface plot: one line per layer across the percent grid.
pub fn surface_plot(grid: &GridSearchResult) -> String {
    let mut by_layer: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for c in &grid.surface {
        by_layer.entry(c.layer).or_default().push((c.percent as f64, c.acc));
    }
    let series: Vec<Series> = by_layer
        .into_iter()
        .map(|(l, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label: format!("layer {l}"), points: pts }
        })
        .collect();
    line_chart("validation accuracy by pruning percent", "percent", "accuracy", &series)
}

/// Write the full report directory atomically (per file).
pub fn write_report(dir: &Path, ctx: &ReportContext) -> Result<()> {
    std::fs::create_dir_all(dir.join("ablations"))?;
    std::fs::create_dir_all(dir.join("plots"))?;

    let surface = serde_json::to_vec_pretty(&ctx.grid).map_err(std::io::Error::from)?;
    atomic_write(&dir.join("surface.json"), &surface)?;
    atomic_write(&dir.join("scores.csv"), ctx.scores.to_csv().as_bytes())?;
    atomic_write(&dir.join("plots/surface.svg"), surface_plot(&ctx.grid).as_bytes())?;

    for (stem, csv) in &ctx.ablations {
        atomic_write(&dir.join(format!("ablations/{stem}.csv")), csv.as_bytes())?;
        if let Some(svg) = plot_from_csv(stem, csv) {
            atomic_write(&dir.join(format!("plots/{stem}.svg")), svg.as_bytes())?;
        }
    }

    let manifest = serde_json::to_vec_pretty(&ctx.manifest).map_err(std::io::Error::from)?;
    atomic_write(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{PruneConfig, SurfaceCell};

    fn toy_grid() -> GridSearchResult {
        let mut surface = Vec::new();
        for l in 0..2 {
            for p in [5u32, 10, 15] {
                surface.push(SurfaceCell {
                    layer: l,
                    percent: p,
                    acc: 0.5 + 0.01 * (l as f64) + 0.001 * (p as f64),
                });
            }
        }
        GridSearchResult {
            baseline: 0.4,
            surface,
            best: PruneConfig { layer: 1, percent: 15, neuron_ids: vec![0] },
        }
    }

    fn toy_scores() -> ScoreMatrix {
        ScoreMatrix {
            n_layers: 2,
            d_mlp: 3,
            n_samples: 1,
            model_fingerprint: [7u8; 32],
            scores: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        }
    }

    #[test]
    fn svg_has_fixed_viewbox_and_no_timestamp() {
        let svg = surface_plot(&toy_grid());
        assert!(svg.contains("viewBox=\"0 0 800 500\""));
        assert!(!svg.contains("202"), "no dates: {svg}");
        let again = surface_plot(&toy_grid());
        assert_eq!(svg, again);
    }

    #[test]
    fn csv_plot_dispatch() {
        let line = plot_from_csv("counts", "count,ood_acc\n5,0.3\n10,0.4\n").unwrap();
        assert!(line.contains("<polyline"));
        let bar = plot_from_csv("sel", "strategy,n,ood_acc\nrandom,10,0.4\ncorrect_only,10,0.5\n")
            .unwrap();
        assert!(bar.contains("<rect") && bar.contains(">random<"));
        // mean/std footer rows are ignored, numeric rows keep the line form
        let sv = plot_from_csv("seeds", "seed,ood_acc\n42,0.4\n43,0.5\nmean,0.45\nstd,0.05\n")
            .unwrap();
        assert!(sv.contains("<rect") || sv.contains("<polyline"));
        assert!(plot_from_csv("junk", "only_one_column\nx\n").is_none());
    }

    #[test]
    fn report_directory_is_rerun_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut ablations = BTreeMap::new();
        ablations.insert("sample_count".to_string(), "count,ood_acc\n5,0.3\n10,0.5\n".to_string());
        let mut manifest = BTreeMap::new();
        manifest.insert("seed".to_string(), serde_json::json!(7));
        manifest.insert("model_sha256".to_string(), serde_json::json!("abc"));
        let ctx = ReportContext {
            scores: toy_scores(),
            grid: toy_grid(),
            ablations,
            manifest,
        };
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_report(&a, &ctx).unwrap();
        write_report(&b, &ctx).unwrap();
        for rel in [
            "surface.json",
            "scores.csv",
            "manifest.json",
            "plots/surface.svg",
            "plots/sample_count.svg",
            "ablations/sample_count.csv",
        ] {
            let x = std::fs::read(a.join(rel)).unwrap();
            let y = std::fs::read(b.join(rel)).unwrap();
            assert_eq!(x, y, "{rel} differs");
            assert!(!x.is_empty());
        }
    }
}
