//! Minimal SVG line charts for the run's diagnostic plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use msn_core::mainbody::GapProfile;
use msn_core::pipeline::{RunDir, Variant, DIRECT_LOG};
use msn_core::{MsnError, Result, TrainLog};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    /// Renders the chart at the origin of a `WIDTH` x `HEIGHT` box.
    fn body(&self, out: &mut String) {
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = bounds(all().map(|p| p.0));
        let (y0, y1) = bounds(all().map(|p| p.1));
        let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;
        let _ = writeln!(
            out,
            r##"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
                sx(xv),
                HEIGHT - MARGIN + 14.0,
                tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
                MARGIN - 4.0,
                sy(yv) + 3.0,
                tick(yv)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for &(x, y) in &s.points {
                let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, sx(x), sy(y));
            }
            let ly = MARGIN + 14.0 + 16.0 * i as f64;
            let lx = WIDTH - MARGIN - 110.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="11">{}</text>"#,
                lx + 18.0,
                lx + 22.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Stacks charts vertically into one SVG document.
pub fn render(charts: &[Chart]) -> String {
    let total = HEIGHT * charts.len() as f64;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{total}" viewBox="0 0 {WIDTH} {total}" font-family="sans-serif">"#
    );
    out.push('\n');
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, c) in charts.iter().enumerate() {
        let _ = writeln!(out, r#"<g transform="translate(0 {})">"#, HEIGHT * i as f64);
        c.body(&mut out);
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

fn write(path: PathBuf, charts: &[Chart]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| MsnError::io(dir, e))?;
    }
    fs::write(&path, render(charts)).map_err(|e| MsnError::io(&path, e))?;
    Ok(path)
}

fn load_profiles(run: &RunDir) -> Result<Vec<GapProfile>> {
    (1..=2)
        .map(|k| {
            let path = run.gaps().join(GapProfile::file_name(k));
            if !path.exists() {
                return Err(MsnError::MissingPrerequisite(format!(
                    "{} (run `analyze-gaps`)",
                    path.display()
                )));
            }
            GapProfile::load(&run.gaps(), k)
        })
        .collect()
}

/// Per-layer activation mean and variance of X1, X2 and X3 through the
/// meta-branch, with each branch's gap layers listed in the legend.
pub fn gaps(run: &RunDir) -> Result<PathBuf> {
    let profiles = load_profiles(run)?;
    let mut charts = Vec::new();
    for (label, pick) in [("mean", 0usize), ("variance", 1)] {
        let stat = |s: &msn_core::backbone::LayerActivationStats| if pick == 0 { s.mean } else { s.variance };
        let mut series = Vec::new();
        for p in &profiles {
            series.push(Series {
                name: format!("X{} gaps {:?}", p.branch, p.gap_layers),
                points: p.branch_stats.iter().enumerate().map(|(l, s)| (l as f64, stat(s))).collect(),
            });
        }
        series.push(Series {
            name: "X3".into(),
            points: profiles[0].meta_stats.iter().enumerate().map(|(l, s)| (l as f64, stat(s))).collect(),
        });
        charts.push(Chart {
            title: format!("Activation {label} per layer of the meta-branch"),
            x_label: "layer".into(),
            y_label: label.into(),
            series,
        });
    }
    write(run.plots().join("gaps.svg"), &charts)
}

fn log_series(log: &TrainLog, prefix: &str) -> Vec<Series> {
    log.heads()
        .into_iter()
        .map(|h| Series {
            name: format!("{prefix}{h}"),
            points: log
                .records
                .iter()
                .filter(|r| r.head == h)
                .map(|r| (r.epoch as f64, r.loss))
                .collect(),
        })
        .collect()
}

fn read_log(dir: &Path, step: usize, hint: &str) -> Result<TrainLog> {
    let path = dir.join(TrainLog::file_name(step));
    if !path.exists() {
        return Err(MsnError::MissingPrerequisite(format!("{} ({hint})", path.display())));
    }
    TrainLog::load(dir, step)
}

/// Training loss per epoch of step 1 and of both step-2 branches.
pub fn trend(run: &RunDir, variant: Variant) -> Result<PathBuf> {
    let s1 = read_log(&run.step(1, Variant::Subtrain), 1, "run `train --step 1`")?;
    let s2 = read_log(&run.step(2, variant), 2, "run `train --step 2`")?;
    let charts = [
        Chart {
            title: "Meta-branch training".into(),
            x_label: "epoch".into(),
            y_label: "loss".into(),
            series: log_series(&s1, ""),
        },
        Chart {
            title: "Adapter training".into(),
            x_label: "epoch".into(),
            y_label: "loss".into(),
            series: log_series(&s2, ""),
        },
    ];
    write(run.plots().join(format!("trend{}.svg", variant.suffix())), &charts)
}

/// Fusion loss per epoch with and without the meta-learner.
pub fn fusion_trend(run: &RunDir, variant: Variant) -> Result<PathBuf> {
    let dir = run.step(3, variant);
    let meta = read_log(&dir, 3, "run `train --step 3`")?;
    let path = dir.join(DIRECT_LOG);
    if !path.exists() {
        return Err(MsnError::MissingPrerequisite(format!("{} (run `train --step 3`)", path.display())));
    }
    let direct = TrainLog::load_from(&path, 3)?;
    let mut series = log_series(&meta, "meta ");
    series.extend(log_series(&direct, "w/o meta "));
    let chart = Chart {
        title: "Fusion training".into(),
        x_label: "epoch".into(),
        y_label: "loss".into(),
        series,
    };
    write(run.plots().join(format!("fusion_trend{}.svg", variant.suffix())), &[chart])
}
