//! Minimal SVG line plots for the three evaluation curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{AttributeReport, MetricCurve};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 44.0;
const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct PlotSeries<'a> {
    pub label: String,
    pub score: f64,
    pub curve: &'a MetricCurve,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Curves on a shared `[0, x_max] x [0, 1]` frame, legend sorted by score.
pub fn curve_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[PlotSeries]) -> String {
    let x_max = series
        .iter()
        .filter_map(|s| s.curve.thresholds.last().copied())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + x / x_max * pw;
    let sy = |y: f64| MARGIN_T + (1.0 - y) * ph;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (x, y) = (sx(f * x_max), sy(f));
        writeln!(
            svg,
            r##"<line x1="{MARGIN_L}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            MARGIN_L + pw
        )
        .unwrap();
        writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{MARGIN_T}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            MARGIN_T + ph
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{f:.1}</text>"#,
            MARGIN_L - 4.0,
            y + 4.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_T + ph + 14.0,
            fmt_tick(f * x_max)
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        MARGIN_T + ph / 2.0,
        escape(y_label)
    )
    .unwrap();

    let mut order: Vec<usize> = (0..series.len()).collect();
    order.sort_by(|&a, &b| series[b].score.total_cmp(&series[a].score));
    for (rank, &i) in order.iter().enumerate() {
        let s = &series[i];
        let color = PALETTE[rank % PALETTE.len()];
        let points: Vec<String> = s
            .curve
            .thresholds
            .iter()
            .zip(&s.curve.values)
            .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        let ly = MARGIN_T + 14.0 + 14.0 * rank as f64;
        let lx = MARGIN_L + pw - 150.0;
        writeln!(
            svg,
            r#"<line x1="{lx}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 16.0,
            ly - 4.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}">[{:.3}] {}</text>"#,
            lx + 20.0,
            s.score,
            escape(&s.label)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

/// Writes `precision_plot.svg`, `normalized_precision_plot.svg` and
/// `success_plot.svg` for the overall rows of `report`.
pub fn write_plots(dir: &Path, report: &AttributeReport) -> Result<Vec<PathBuf>> {
    let specs: [(
        &str,
        &str,
        &str,
        &str,
        fn(&crate::metrics::ScoreSummary) -> (f64, &MetricCurve),
    ); 3] = [
        (
            "precision_plot.svg",
            "Precision plots of OPE",
            "Location error threshold (px)",
            "Precision",
            |s| (s.pr, &s.pr_curve),
        ),
        (
            "normalized_precision_plot.svg",
            "Normalized precision plots of OPE",
            "Normalized location error threshold",
            "Normalized precision",
            |s| (s.npr, &s.npr_curve),
        ),
        (
            "success_plot.svg",
            "Success plots of OPE",
            "Overlap threshold",
            "Success rate",
            |s| (s.sr, &s.sr_curve),
        ),
    ];
    let mut written = Vec::new();
    for (file, title, xl, yl, pick) in specs {
        let series: Vec<PlotSeries> = report
            .rows
            .iter()
            .map(|r| {
                let (score, curve) = pick(&r.overall);
                PlotSeries {
                    label: r.tracker.clone(),
                    score,
                    curve,
                }
            })
            .collect();
        let path = dir.join(file);
        std::fs::write(&path, curve_plot_svg(title, xl, yl, &series)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_polyline_per_series() {
        let c = MetricCurve {
            thresholds: MetricCurve::grid(1.0),
            values: vec![0.5; 51],
        };
        let series = [
            PlotSeries {
                label: "a<b".into(),
                score: 0.2,
                curve: &c,
            },
            PlotSeries {
                label: "b".into(),
                score: 0.7,
                curve: &c,
            },
        ];
        let svg = curve_plot_svg("t", "x", "y", &series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.find("[0.700] b").unwrap() < svg.find("[0.200]").unwrap());
    }
}
