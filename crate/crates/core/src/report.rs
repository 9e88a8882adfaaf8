//! Aggregation of evaluation curves across seeds, summary tables and SVG
//! plots.
//!
//! Runs are grouped by config hash. At every evaluation step the band is
//! `mean ± 1.96 · std / sqrt(seeds)` with the sample standard deviation; a
//! group with one seed has no band.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};

use crate::config::RunManifest;
use crate::run::read_eval_csv;

pub const SUMMARY_HEADER: [&str; 10] =
    ["group", "config_hash", "subset_label", "env_step", "n_seeds", "mean", "std", "ci_low", "ci_high", "seeds"];

/// One aggregated point of a curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub env_step: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// `None` for a single seed.
    pub ci: Option<(f64, f64)>,
    pub seeds: Vec<u64>,
}

/// Mean, sample standard deviation and normal-approximation 95% band.
pub fn mean_ci(values: &[f64]) -> (f64, f64, Option<(f64, f64)>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let half = 1.96 * std / n.sqrt();
    (mean, std, Some((mean - half, mean + half)))
}

#[derive(Debug, Clone)]
pub struct Group {
    pub label: String,
    pub config_hash: String,
    pub run_dirs: Vec<PathBuf>,
    /// Subset label → curve ordered by step.
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
}

/// Finds run directories (those holding `manifest.json` and `eval.csv`) at or
/// below each input path.
pub fn discover_runs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if dir.join("manifest.json").is_file() && dir.join("eval.csv").is_file() {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        if dir.is_dir() {
            let mut children: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
            children.sort();
            for c in children {
                walk(&c, out)?;
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in inputs {
        ensure!(p.exists(), "{} does not exist", p.display());
        walk(p, &mut out)?;
    }
    out.sort();
    out.dedup();
    ensure!(!out.is_empty(), "no run directories with eval.csv found");
    Ok(out)
}

fn group_label(m: &RunManifest) -> String {
    let c = &m.config;
    format!("{} {} {} [{}]", c.env_id, c.training_mode, c.merge_strategy, &m.config_hash[..8.min(m.config_hash.len())])
}

/// Groups runs by config hash and aggregates their evaluation curves.
pub fn aggregate(run_dirs: &[PathBuf]) -> Result<Vec<Group>> {
    ensure!(!run_dirs.is_empty(), "no runs to report on");
    // hash → (label, dirs, subset → step → seed values)
    type Cells = BTreeMap<String, BTreeMap<usize, Vec<(u64, f64)>>>;
    let mut groups: BTreeMap<String, (String, Vec<PathBuf>, Cells)> = BTreeMap::new();
    for dir in run_dirs {
        let manifest = RunManifest::from_json(&fs::read_to_string(dir.join("manifest.json")).with_context(|| format!("reading {}/manifest.json", dir.display()))?)?;
        let rows = read_eval_csv(&dir.join("eval.csv"))?;
        let entry = groups.entry(manifest.config_hash.clone()).or_insert_with(|| (group_label(&manifest), Vec::new(), BTreeMap::new()));
        entry.1.push(dir.clone());
        for (step, label, success, _) in rows {
            entry.2.entry(label).or_default().entry(step).or_default().push((manifest.config.seed, success));
        }
    }
    Ok(groups
        .into_iter()
        .map(|(hash, (label, run_dirs, cells))| {
            let curves = cells
                .into_iter()
                .map(|(subset, steps)| {
                    let points = steps
                        .into_iter()
                        .map(|(env_step, mut vals)| {
                            vals.sort_by_key(|v| v.0);
                            let values: Vec<f64> = vals.iter().map(|v| v.1).collect();
                            let (mean, std, ci) = mean_ci(&values);
                            CurvePoint { env_step, n: values.len(), mean, std, ci, seeds: vals.iter().map(|v| v.0).collect() }
                        })
                        .collect();
                    (subset, points)
                })
                .collect();
            Group { label, config_hash: hash, run_dirs, curves }
        })
        .collect())
}

fn summary_rows(groups: &[Group], last_only: bool) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for g in groups {
        for (subset, curve) in &g.curves {
            let points: &[CurvePoint] = if last_only { &curve[curve.len().saturating_sub(1)..] } else { curve };
            for p in points {
                let (lo, hi) = p.ci.map_or((String::new(), String::new()), |(l, h)| (l.to_string(), h.to_string()));
                rows.push(vec![
                    g.label.clone(),
                    g.config_hash.clone(),
                    subset.clone(),
                    p.env_step.to_string(),
                    p.n.to_string(),
                    p.mean.to_string(),
                    p.std.to_string(),
                    lo,
                    hi,
                    p.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
                ]);
            }
        }
    }
    rows
}

fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Success rate against environment steps for one subset, one curve per group.
pub fn curve_svg(title: &str, groups: &[(&str, &[CurvePoint])]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 110.0);
    let max_step = groups.iter().flat_map(|(_, c)| c.iter().map(|p| p.env_step)).max().unwrap_or(1).max(1) as f64;
    let x = |s: usize| left + (w - left - right) * s as f64 / max_step;
    let y = |v: f64| top + (h - top - bottom) * (1.0 - v.clamp(0.0, 1.0));
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(svg, r##"<line x1="{left}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, w - right, y(v), y(v));
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 6.0, y(v) + 4.0);
    }
    for k in 0..=4 {
        let s = (max_step * k as f64 / 4.0).round() as usize;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{s}</text>"#, x(s), h - bottom + 16.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#, (left + w - right) / 2.0, h - bottom + 32.0);
    let _ = writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">success rate</text>"#, (top + h - bottom) / 2.0, (top + h - bottom) / 2.0);
    for (i, (label, curve)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let band: Vec<&CurvePoint> = curve.iter().filter(|p| p.ci.is_some()).collect();
        if band.len() == curve.len() && !band.is_empty() {
            let upper = curve.iter().map(|p| format!("{:.1},{:.1}", x(p.env_step), y(p.ci.expect("band").1)));
            let lower = curve.iter().rev().map(|p| format!("{:.1},{:.1}", x(p.env_step), y(p.ci.expect("band").0)));
            let pts: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(svg, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.join(" "));
        }
        let pts: Vec<String> = curve.iter().map(|p| format!("{:.1},{:.1}", x(p.env_step), y(p.mean))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for p in curve.iter() {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, x(p.env_step), y(p.mean));
        }
        let ly = h - bottom + 50.0 + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<rect x="{left}" y="{:.1}" width="14" height="4" fill="{color}"/>"#, ly - 4.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{ly:.1}">{}</text>"#, left + 20.0, escape(label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub groups: Vec<Group>,
    pub summary_csv: PathBuf,
    pub final_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Writes `summary.csv` (every step), `final.csv` (last step of each curve)
/// and `plots/success_<subset>.svg` under `out_dir`.
pub fn write_report(inputs: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    let runs = discover_runs(inputs)?;
    let groups = aggregate(&runs)?;
    fs::create_dir_all(out_dir.join("plots"))?;
    let summary_csv = out_dir.join("summary.csv");
    let final_csv = out_dir.join("final.csv");
    write_csv(&summary_csv, &summary_rows(&groups, false))?;
    write_csv(&final_csv, &summary_rows(&groups, true))?;
    let mut subsets: Vec<&String> = groups.iter().flat_map(|g| g.curves.keys()).collect();
    subsets.sort();
    subsets.dedup();
    let mut plots = Vec::new();
    for subset in subsets {
        let series: Vec<(&str, &[CurvePoint])> =
            groups.iter().filter_map(|g| g.curves.get(subset).map(|c| (g.label.as_str(), c.as_slice()))).collect();
        let path = out_dir.join("plots").join(format!("success_{}.svg", file_safe(subset)));
        fs::write(&path, curve_svg(&format!("success rate, views: {subset}"), &series))?;
        plots.push(path);
    }
    Ok(ReportOutput { groups, summary_csv, final_csv, plots })
}

/// Plain-text table of the last point of every curve.
pub fn final_table(groups: &[Group]) -> String {
    let mut out = format!("{:<48} {:<8} {:>9} {:>6} {:>7} {:>17}\n", "group", "subset", "env_step", "seeds", "mean", "95% band");
    for g in groups {
        for (subset, curve) in &g.curves {
            if let Some(p) = curve.last() {
                let band = p.ci.map_or("-".to_string(), |(l, h)| format!("[{l:.3}, {h:.3}]"));
                out += &format!("{:<48} {:<8} {:>9} {:>6} {:>7.3} {:>17}\n", g.label, subset, p.env_step, p.n, p.mean, band);
            }
        }
    }
    out
}
