//! Cross-run reports: a CSV table and one SVG line chart per metric.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::RoundMetrics;
use crate::rsi::{write_atomic, RunManifest, RunStatus, MANIFEST_FILE};

/// Metrics plotted by [`write_report`].
pub const PLOTTED: [&str; 3] = ["mmd_to_reference", "mean_composite", "hallucination_rate"];

pub fn metric_value(m: &RoundMetrics, name: &str) -> Result<f64> {
    Ok(match name {
        "mmd_to_reference" => m.mmd_to_reference,
        "mean_composite" => m.mean_composite,
        "mean_alignment" => m.mean_alignment,
        "mean_aesthetic" => m.mean_aesthetic,
        "hallucination_rate" => m.hallucination_rate,
        other => return Err(Error::InvalidArgument(format!("unknown metric '{other}'"))),
    })
}

/// A named metric trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

/// Finds run directories (those holding a manifest) at or below each input
/// path, in sorted order. Descent stops at the first manifest.
pub fn discover_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if p.join(MANIFEST_FILE).exists() {
            out.push(p.to_path_buf());
            return Ok(());
        }
        let mut subdirs: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.is_dir())
            .collect();
        subdirs.sort();
        for d in subdirs {
            walk(&d, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        walk(p, &mut out)?;
    }
    if out.is_empty() {
        return Err(Error::Empty("run directories"));
    }
    Ok(out)
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Deterministic SVG line chart, one polyline per series, legend included.
pub fn render_svg(title: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 180.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(1).max(2);
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let px = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let py = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for tick in 0..=4 {
        let v = lo + (hi - lo) * tick as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
            left - 4.0,
            py(v) + 3.0,
            format_args!("{v:.4}")
        );
    }
    for i in 0..n {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{i}</text>"#,
            px(i),
            top + ph + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">round</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    for (si, ser) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * si as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 18.0,
            ly - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 24.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Display name for a run: its configured name, disambiguated by seed when
/// several runs share it.
fn run_names(manifests: &[RunManifest]) -> Vec<String> {
    manifests
        .iter()
        .map(|m| {
            let dup = manifests.iter().filter(|o| o.name == m.name).count() > 1;
            if dup {
                format!("{} (seed {})", m.name, m.seed)
            } else {
                m.name.clone()
            }
        })
        .collect()
}

/// Reads completed runs; unreadable or unfinished directories are returned
/// separately with the reason.
pub fn load_completed(run_dirs: &[PathBuf]) -> (Vec<RunManifest>, Vec<(PathBuf, String)>) {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for d in run_dirs {
        match RunManifest::read(d) {
            Ok(m) if m.status == RunStatus::Completed => ok.push(m),
            Ok(m) => skipped.push((d.clone(), format!("run status is {:?}", m.status))),
            Err(e) => skipped.push((d.clone(), e.to_string())),
        }
    }
    (ok, skipped)
}

/// Writes `report.csv` and one SVG per plotted metric into `out`.
/// Returns the written paths.
pub fn write_report(manifests: &[RunManifest], out: &Path) -> Result<Vec<PathBuf>> {
    if manifests.is_empty() {
        return Err(Error::Empty("completed runs"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let names = run_names(manifests);
    let mut written = Vec::new();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run",
        "kind",
        "seed",
        "round",
        "mmd_to_reference",
        "mean_composite",
        "mean_alignment",
        "mean_aesthetic",
        "hallucination_rate",
    ])?;
    for (m, name) in manifests.iter().zip(&names) {
        let kind = serde_json::to_value(m.kind)?.as_str().unwrap_or_default().to_string();
        for r in &m.rounds {
            let x = &r.metrics;
            w.write_record([
                name.clone(),
                kind.clone(),
                m.seed.to_string(),
                r.round.to_string(),
                fmt_num(x.mmd_to_reference),
                fmt_num(x.mean_composite),
                fmt_num(x.mean_alignment),
                fmt_num(x.mean_aesthetic),
                fmt_num(x.hallucination_rate),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let csv_path = out.join("report.csv");
    write_atomic(&csv_path, &bytes)?;
    written.push(csv_path);

    for metric in PLOTTED {
        let series = manifests
            .iter()
            .zip(&names)
            .map(|(m, name)| {
                Ok(Series {
                    name: name.clone(),
                    values: m.rounds.iter().map(|r| metric_value(&r.metrics, metric)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let path = out.join(format!("{metric}.svg"));
        write_atomic(&path, render_svg(metric, &series).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_deterministic_and_has_legend() {
        let series = vec![
            Series {
                name: "full <a>".into(),
                values: vec![0.1, 0.3, 0.2],
            },
            Series {
                name: "none".into(),
                values: vec![0.1, f64::NAN, 0.4],
            },
        ];
        let a = render_svg("mmd", &series);
        assert_eq!(a, render_svg("mmd", &series));
        assert!(a.contains("full &lt;a&gt;"));
        assert!(a.contains(">none<"));
        assert_eq!(a.matches("<polyline").count(), 2);
    }

    #[test]
    fn flat_series_renders() {
        let s = render_svg("x", &[Series { name: "a".into(), values: vec![1.0] }]);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
    }
}
