use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{usage_err, Error, Result};
use crate::metrics::{parse_csv, MetricRow};

/// Metric columns in table order.
pub const METRICS: [&str; 5] = ["psnr", "ssim", "miou", "pixel_accuracy", "mean_accuracy"];

#[derive(Clone, Debug, Default)]
pub struct ReportArgs {
    /// Run directories (`<output root>/<name>`) or directories of CSVs.
    pub runs: Vec<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// `experiment -> unit -> metric -> value`.
pub type Summary = BTreeMap<String, BTreeMap<usize, BTreeMap<String, f64>>>;

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let metrics = dir.join("metrics");
    let dir = if metrics.is_dir() { metrics } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

/// Read every metrics CSV of every run. Runs without any CSV are reported
/// together by name.
pub fn collect(runs: &[PathBuf]) -> Result<Summary> {
    if runs.is_empty() {
        return Err(usage_err!("no run directories given"));
    }
    let mut missing = Vec::new();
    let mut summary = Summary::new();
    for run in runs {
        let files = csv_files(run);
        if files.is_empty() {
            missing.push(run.display().to_string());
            continue;
        }
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            for MetricRow {
                experiment,
                unit,
                metric,
                value,
            } in parse_csv(&text)?
            {
                summary
                    .entry(experiment)
                    .or_default()
                    .entry(unit)
                    .or_default()
                    .entry(metric)
                    .or_insert(value);
            }
        }
    }
    if !missing.is_empty() {
        return Err(usage_err!("no metrics found for run(s): {}", missing.join(", ")));
    }
    Ok(summary)
}

/// Gaussian sigma from an experiment id ending in `gaussian<sigma>`.
pub fn sigma_of(experiment: &str) -> Option<f64> {
    experiment.rsplit('/').next()?.strip_prefix("gaussian")?.parse().ok()
}

/// The id without its trailing noise label.
fn series_of(experiment: &str) -> &str {
    experiment.rsplit_once('/').map_or(experiment, |(a, _)| a)
}

pub fn table_text(s: &Summary) -> String {
    let width = s.keys().map(|k| k.len()).max().unwrap_or(10).max(10);
    let mut t = format!("{:<width$}  {:>4}", "experiment", "unit");
    for m in ["psnr", "ssim", "miou", "pix_acc", "mean_acc"] {
        let _ = write!(t, "  {m:>9}");
    }
    t.push('\n');
    for (exp, units) in s {
        for (unit, vals) in units {
            let _ = write!(t, "{exp:<width$}  {unit:>4}");
            for m in METRICS {
                match vals.get(m) {
                    Some(v) => {
                        let _ = write!(t, "  {v:>9.4}");
                    }
                    None => {
                        let _ = write!(t, "  {:>9}", "-");
                    }
                }
            }
            t.push('\n');
        }
    }
    t
}

pub fn table_csv(s: &Summary) -> String {
    let mut t = format!("experiment,unit,{}\n", METRICS.join(","));
    for (exp, units) in s {
        for (unit, vals) in units {
            let _ = write!(t, "{exp},{unit}");
            for m in METRICS {
                match vals.get(m) {
                    Some(v) => {
                        let _ = write!(t, ",{v:.6}");
                    }
                    None => t.push(','),
                }
            }
            t.push('\n');
        }
    }
    t
}

pub type Series = (String, Vec<(f64, f64)>);

/// `metric` against unit index, one line per experiment.
pub fn unit_series(s: &Summary, metric: &str) -> Vec<Series> {
    s.iter()
        .map(|(exp, units)| {
            let pts = units
                .iter()
                .filter_map(|(&u, vals)| vals.get(metric).map(|&v| (u as f64, v)))
                .collect();
            (exp.clone(), pts)
        })
        .filter(|(_, pts): &Series| !pts.is_empty())
        .collect()
}

/// `metric` of the last unit against Gaussian sigma, one line per model
/// and split.
pub fn sigma_series(s: &Summary, metric: &str) -> Vec<Series> {
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (exp, units) in s {
        let Some(sigma) = sigma_of(exp) else { continue };
        let last = units.iter().rev().find_map(|(_, vals)| vals.get(metric));
        if let Some(&v) = last {
            by.entry(series_of(exp).to_string()).or_default().push((sigma, v));
        }
    }
    by.into_iter()
        .map(|(k, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, pts)
        })
        .collect()
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A plain SVG line chart with a legend below the axes.
pub fn line_plot_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (w, plot_h) = (640.0, 360.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let legend_h = 18.0 * series.len() as f64 + 10.0;
    let h = plot_h + legend_h;
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.08).max(1e-3);
    y0 -= pad;
    y1 += pad;
    let (pw, ph) = (w - left - right, plot_h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (x, y) = (sx(xv), sy(yv));
        let _ = writeln!(s, r##"<line x1="{x}" y1="{top}" x2="{x}" y2="{}" stroke="#ddd"/>"##, top + ph);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{xv:.3}</text>"#, top + ph + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{yv:.3}</text>"#, left - 6.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        top + ph + 36.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(ylabel)
    );
    for (k, (name, p)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for &(x, y) in p {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, sx(x), sy(y));
        }
        let ly = plot_h + 14.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{left}" y="{}" width="12" height="12" fill="{c}"/>"#, ly - 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, left + 18.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Merge the metrics of several runs into `report.txt`, `report.csv` and
/// SVG plots of each metric against unit index and against noise level.
/// Nothing is written when any input is missing.
pub fn cmd_report(args: &ReportArgs) -> Result<ReportFiles> {
    let summary = collect(&args.runs)?;
    let table = args.out.join("report.txt");
    let csv = args.out.join("report.csv");
    if (table.exists() || csv.exists()) && !args.force {
        return Err(usage_err!("{} already holds a report; pass --force to overwrite", args.out.display()));
    }
    let mut files: Vec<(PathBuf, String)> = vec![(table.clone(), table_text(&summary)), (csv.clone(), table_csv(&summary))];
    for m in METRICS {
        let units = unit_series(&summary, m);
        if !units.is_empty() {
            let svg = line_plot_svg(&format!("{m} by unit"), "unit", m, &units);
            files.push((args.out.join(format!("unit_{m}.svg")), svg));
        }
        let sigmas = sigma_series(&summary, m);
        if !sigmas.is_empty() {
            let svg = line_plot_svg(&format!("{m} of the last unit by noise level"), "sigma", m, &sigmas);
            files.push((args.out.join(format!("sigma_{m}.svg")), svg));
        }
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut plots = Vec::new();
    for (path, text) in files {
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if path.extension().is_some_and(|x| x == "svg") {
            plots.push(path);
        }
    }
    Ok(ReportFiles { table, csv, plots })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_run(root: &Path, name: &str, rows: &str) -> PathBuf {
        let dir = root.join(name);
        std::fs::create_dir_all(dir.join("metrics")).unwrap();
        std::fs::write(
            dir.join("metrics/train.csv"),
            format!("experiment,unit,metric,value\n{rows}"),
        )
        .unwrap();
        dir
    }

    #[test]
    fn three_runs_give_one_row_per_unit() {
        let tmp = tempfile::tempdir().unwrap();
        let mut runs = Vec::new();
        for n in 1..=3 {
            let mut rows = String::new();
            for u in 1..=n {
                rows += &format!("r{n}/conditioned-x{n}/test/gaussian50,{u},psnr,{}\n", 20.0 + u as f64);
                rows += &format!("r{n}/conditioned-x{n}/test/gaussian50,{u},miou,0.5\n");
            }
            runs.push(write_run(tmp.path(), &format!("r{n}"), &rows));
        }
        let out = tmp.path().join("report");
        let files = cmd_report(&ReportArgs {
            runs,
            out: out.clone(),
            force: false,
        })
        .unwrap();
        let csv = std::fs::read_to_string(&files.csv).unwrap();
        assert_eq!(csv.lines().count(), 1 + 1 + 2 + 3);
        assert!(csv.contains("r3/conditioned-x3/test/gaussian50,3,23.000000,,0.500000,,"));
        assert!(files.plots.contains(&out.join("unit_psnr.svg")));
        let text = std::fs::read_to_string(files.table).unwrap();
        assert!(text.contains("r2/conditioned-x2/test/gaussian50"));
    }

    #[test]
    fn sigma_sweep_makes_a_noise_plot() {
        let tmp = tempfile::tempdir().unwrap();
        let runs: Vec<PathBuf> = [10, 30, 50]
            .iter()
            .map(|s| {
                let rows = format!("s{s}/conditioned-x1/test/gaussian{s},1,miou,{}\n", 1.0 - *s as f64 / 100.0);
                write_run(tmp.path(), &format!("s{s}"), &rows)
            })
            .collect();
        let summary = collect(&runs).unwrap();
        let series = sigma_series(&summary, "miou");
        // each run has its own name, hence its own series
        assert_eq!(series.len(), 3);
        let files = cmd_report(&ReportArgs {
            runs,
            out: tmp.path().join("rep"),
            force: false,
        })
        .unwrap();
        let svg = std::fs::read_to_string(tmp.path().join("rep/sigma_miou.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
        assert!(files.plots.len() >= 2);
    }

    #[test]
    fn empty_or_missing_inputs_write_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("rep");
        let err = cmd_report(&ReportArgs {
            runs: vec![],
            out: out.clone(),
            force: false,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        let good = write_run(tmp.path(), "good", "g/plain-x1/test/gaussian50,1,psnr,25\n");
        let err = cmd_report(&ReportArgs {
            runs: vec![good, tmp.path().join("ghost"), tmp.path().join("phantom")],
            out: out.clone(),
            force: false,
        })
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ghost") && msg.contains("phantom"), "{msg}");
        assert!(!out.exists());
    }

    #[test]
    fn sigma_parsing() {
        assert_eq!(sigma_of("a/b/test/gaussian25"), Some(25.0));
        assert_eq!(sigma_of("a/b/test/poisson255"), None);
    }
}
