//! Figure rendering: accuracy curves with error bars, emitted as SVG, plus a
//! canonical CSV echo of the records they were drawn from.
//!
//! Plotting is a pure function of the records: the independent variable of
//! each figure is inferred from which coordinates vary. Sweeps over a label
//! budget get one figure per shift domain (methods without labels appear as
//! flat reference lines); parameter sweeps get one figure per varying
//! coordinate, holding the other coordinates at their most common value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::experiments::{write_records_csv, ResultRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Coord {
    Mu1,
    Sigma1,
    Mu2,
    Sigma2,
}

const COORDS: [Coord; 4] = [Coord::Mu1, Coord::Sigma1, Coord::Mu2, Coord::Sigma2];

impl Coord {
    fn get(self, r: &ResultRecord) -> Option<f64> {
        match self {
            Coord::Mu1 => Some(r.mu_1),
            Coord::Sigma1 => Some(r.sigma_1),
            Coord::Mu2 => r.mu_2,
            Coord::Sigma2 => r.sigma_2,
        }
    }

    fn kind(self) -> &'static str {
        match self {
            Coord::Mu1 | Coord::Mu2 => "mu",
            Coord::Sigma1 | Coord::Sigma2 => "sigma",
        }
    }

    fn axis_index(self) -> usize {
        match self {
            Coord::Mu1 | Coord::Sigma1 => 0,
            Coord::Mu2 | Coord::Sigma2 => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct SeriesPoint {
    x: f64,
    mean: f64,
    std: f64,
}

#[derive(Debug, Clone)]
struct Series {
    method: String,
    /// Rendered as a horizontal reference line instead of a curve.
    flat: bool,
    points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone)]
struct PlotSpec {
    file_stem: String,
    title: String,
    x_label: String,
    log_x: bool,
    series: Vec<Series>,
}

fn method_rank(m: &str) -> usize {
    match m {
        "source" => 0,
        "adapted" => 1,
        "oracle" => 2,
        "ft-last" => 3,
        "ft-full" => 4,
        _ => 5,
    }
}

fn method_color(m: &str) -> &'static str {
    match m {
        "source" => "#d62728",
        "adapted" => "#1f77b4",
        "oracle" => "#2ca02c",
        "ft-last" => "#ff7f0e",
        "ft-full" => "#9467bd",
        _ => "#7f7f7f",
    }
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Trims "30" out of 30.0 but keeps "0.5" as is.
fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn sanitize(stem: &str) -> String {
    stem.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn distinct_sorted(vals: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut keys: Vec<u64> = vals.map(f64::to_bits).collect();
    keys.sort_unstable_by(|a, b| f64::from_bits(*a).total_cmp(&f64::from_bits(*b)));
    keys.dedup();
    keys.into_iter().map(f64::from_bits).collect()
}

/// Most common value; ties go to the smallest.
fn mode(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for v in vals {
        *counts.entry(v.to_bits()).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .map(|(bits, c)| (f64::from_bits(bits), c))
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .map(|(v, _)| v)
}

fn methods_in(rows: &[&ResultRecord]) -> Vec<String> {
    let mut ms: Vec<String> = Vec::new();
    for r in rows {
        if !ms.contains(&r.method) {
            ms.push(r.method.clone());
        }
    }
    ms.sort_by(|a, b| method_rank(a).cmp(&method_rank(b)).then(a.cmp(b)));
    ms
}

fn axis_names(rows: &[&ResultRecord]) -> Vec<String> {
    rows[0].axes.split('+').map(str::to_string).collect()
}

fn series_over_coord(rows: &[&ResultRecord], coord: Coord) -> Vec<Series> {
    let xs = distinct_sorted(rows.iter().filter_map(|r| coord.get(r)));
    methods_in(rows)
        .into_iter()
        .map(|method| {
            let points = xs
                .iter()
                .filter_map(|&x| {
                    let vals: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.method == method && coord.get(r) == Some(x))
                        .map(|r| r.accuracy)
                        .collect();
                    if vals.is_empty() {
                        return None;
                    }
                    let (mean, std) = mean_std(&vals);
                    Some(SeriesPoint { x, mean, std })
                })
                .collect();
            Series {
                method,
                flat: false,
                points,
            }
        })
        .collect()
}

fn shift_context(r: &ResultRecord) -> String {
    let names: Vec<&str> = r.axes.split('+').collect();
    let mut s = format!("{} mu={} sigma={}", names[0], fmt_num(r.mu_1), fmt_num(r.sigma_1));
    if let (Some(mu), Some(sg), Some(name)) = (r.mu_2, r.sigma_2, names.get(1)) {
        let _ = write!(s, ", {} mu={} sigma={}", name, fmt_num(mu), fmt_num(sg));
    }
    s
}

fn plot_specs(records: &[ResultRecord]) -> Vec<PlotSpec> {
    let mut by_exp: BTreeMap<&str, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        by_exp.entry(&r.experiment_id).or_default().push(r);
    }

    let mut specs = Vec::new();
    for (exp, rows) in by_exp {
        let budgets: Vec<usize> = {
            let mut ns: Vec<usize> = rows
                .iter()
                .filter(|r| r.n_labels > 0)
                .map(|r| r.n_labels)
                .collect();
            ns.sort_unstable();
            ns.dedup();
            ns
        };

        if !budgets.is_empty() {
            // one figure per shift domain, accuracy against the label budget
            let shift_keys = distinct_shifts(&rows);
            for key in shift_keys {
                let domain: Vec<&ResultRecord> = rows
                    .iter()
                    .copied()
                    .filter(|r| shift_key(r) == key)
                    .collect();
                let mut series = Vec::new();
                for method in methods_in(&domain) {
                    let (sup, unsup): (Vec<&&ResultRecord>, Vec<&&ResultRecord>) = domain
                        .iter()
                        .filter(|r| r.method == method)
                        .partition(|r| r.n_labels > 0);
                    if !sup.is_empty() {
                        let points = budgets
                            .iter()
                            .filter_map(|&n| {
                                let vals: Vec<f64> = sup
                                    .iter()
                                    .filter(|r| r.n_labels == n)
                                    .map(|r| r.accuracy)
                                    .collect();
                                if vals.is_empty() {
                                    return None;
                                }
                                let (mean, std) = mean_std(&vals);
                                Some(SeriesPoint {
                                    x: n as f64,
                                    mean,
                                    std,
                                })
                            })
                            .collect();
                        series.push(Series {
                            method: method.clone(),
                            flat: false,
                            points,
                        });
                    }
                    if !unsup.is_empty() {
                        let vals: Vec<f64> = unsup.iter().map(|r| r.accuracy).collect();
                        let (mean, std) = mean_std(&vals);
                        series.push(Series {
                            method: method.clone(),
                            flat: true,
                            points: vec![SeriesPoint { x: 0.0, mean, std }],
                        });
                    }
                }
                let ctx = shift_context(domain[0]);
                let mut stem = format!("{exp}-mu{}", fmt_num(domain[0].mu_1));
                if let Some(mu2) = domain[0].mu_2 {
                    let _ = write!(stem, "-mu2_{}", fmt_num(mu2));
                }
                stem.push_str("-vs-labels");
                specs.push(PlotSpec {
                    file_stem: sanitize(&stem),
                    title: format!("{exp} ({ctx})"),
                    x_label: "target labels".into(),
                    log_x: true,
                    series,
                });
            }
            continue;
        }

        // parameter sweep: plot against every coordinate that varies
        let mut varying: Vec<Coord> = COORDS
            .into_iter()
            .filter(|&c| distinct_sorted(rows.iter().filter_map(|r| c.get(r))).len() > 1)
            .collect();
        if varying.is_empty() {
            varying.push(Coord::Mu1);
        }
        let names = axis_names(&rows);
        for &coord in &varying {
            // hold the other varying coordinates at their most common value
            let fixed: Vec<(Coord, f64)> = varying
                .iter()
                .filter(|&&c| c != coord)
                .filter_map(|&c| mode(rows.iter().filter_map(|r| c.get(r))).map(|v| (c, v)))
                .collect();
            let view: Vec<&ResultRecord> = rows
                .iter()
                .copied()
                .filter(|r| fixed.iter().all(|&(c, v)| c.get(r) == Some(v)))
                .collect();
            if view.is_empty() {
                continue;
            }
            let axis = names
                .get(coord.axis_index())
                .cloned()
                .unwrap_or_else(|| "axis".into());
            let series = series_over_coord(&view, coord);
            specs.push(PlotSpec {
                file_stem: sanitize(&format!("{exp}-vs-{}-{axis}", coord.kind())),
                title: exp.to_string(),
                x_label: format!("{} ({axis})", coord.kind()),
                log_x: false,
                series,
            });
        }
    }
    specs
}

fn shift_key(r: &ResultRecord) -> [u64; 4] {
    [
        r.mu_1.to_bits(),
        r.sigma_1.to_bits(),
        r.mu_2.map_or(u64::MAX, f64::to_bits),
        r.sigma_2.map_or(u64::MAX, f64::to_bits),
    ]
}

fn distinct_shifts(rows: &[&ResultRecord]) -> Vec<[u64; 4]> {
    let mut keys: Vec<[u64; 4]> = rows.iter().map(|r| shift_key(r)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

// -- SVG rendering ------------------------------------------------------------------

const W: f64 = 640.0;
const H: f64 = 440.0;
const X0: f64 = 70.0;
const X1: f64 = 610.0;
const Y0: f64 = 40.0;
const Y1: f64 = 380.0;

fn render_svg(spec: &PlotSpec) -> String {
    let xs: Vec<f64> = spec
        .series
        .iter()
        .filter(|s| !s.flat)
        .flat_map(|s| s.points.iter().map(|p| p.x))
        .collect();
    let xs = distinct_sorted(xs.into_iter());
    let (xmin, xmax) = match (xs.first(), xs.last()) {
        (Some(&a), Some(&b)) if a != b => (a, b),
        (Some(&a), _) => (a - 1.0, a + 1.0),
        _ => (0.0, 1.0),
    };
    let tx = |x: f64| -> f64 {
        let t = if spec.log_x {
            (x.log10() - xmin.log10()) / (xmax.log10() - xmin.log10())
        } else {
            (x - xmin) / (xmax - xmin)
        };
        X0 + t.clamp(0.0, 1.0) * (X1 - X0)
    };
    let ty = |a: f64| -> f64 { Y1 - a.clamp(0.0, 1.0) * (Y1 - Y0) };

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        (X0 + X1) / 2.0,
        xml_escape(&spec.title)
    );

    // y gridlines and labels at 0.0 .. 1.0
    for i in 0..=5 {
        let a = i as f64 / 5.0;
        let y = ty(a);
        let _ = writeln!(
            s,
            "<line x1=\"{X0}\" y1=\"{y:.2}\" x2=\"{X1}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{a:.1}</text>",
            X0 - 8.0,
            y + 4.0
        );
    }
    // x ticks at the data points (thinned if crowded)
    let step = xs.len().div_ceil(12).max(1);
    for (i, &x) in xs.iter().enumerate() {
        if i % step != 0 && i != xs.len() - 1 {
            continue;
        }
        let px = tx(x);
        let _ = writeln!(
            s,
            "<line x1=\"{px:.2}\" y1=\"{Y1}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"#888888\"/>",
            Y1 + 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            Y1 + 20.0,
            fmt_num(x)
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{X0}\" y=\"{Y0}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#444444\"/>",
        X1 - X0,
        Y1 - Y0
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        (X0 + X1) / 2.0,
        Y1 + 45.0,
        xml_escape(&spec.x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">accuracy</text>",
        (Y0 + Y1) / 2.0,
        (Y0 + Y1) / 2.0
    );

    for series in &spec.series {
        let color = method_color(&series.method);
        if series.flat {
            let p = &series.points[0];
            let (top, bot) = (ty(p.mean + p.std), ty(p.mean - p.std));
            let _ = writeln!(
                s,
                "<rect x=\"{X0}\" y=\"{top:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" fill-opacity=\"0.12\"/>",
                X1 - X0,
                (bot - top).max(0.0)
            );
            let y = ty(p.mean);
            let _ = writeln!(
                s,
                "<line x1=\"{X0}\" y1=\"{y:.2}\" x2=\"{X1}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>"
            );
            continue;
        }
        let mut path = String::new();
        for p in &series.points {
            let _ = write!(path, "{:.2},{:.2} ", tx(p.x), ty(p.mean));
        }
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path.trim_end()
        );
        for p in &series.points {
            let (px, py) = (tx(p.x), ty(p.mean));
            let (top, bot) = (ty(p.mean + p.std), ty(p.mean - p.std));
            let _ = writeln!(
                s,
                "<line x1=\"{px:.2}\" y1=\"{top:.2}\" x2=\"{px:.2}\" y2=\"{bot:.2}\" stroke=\"{color}\" class=\"errorbar\"/>"
            );
            for yy in [top, bot] {
                let _ = writeln!(
                    s,
                    "<line x1=\"{:.2}\" y1=\"{yy:.2}\" x2=\"{:.2}\" y2=\"{yy:.2}\" stroke=\"{color}\"/>",
                    px - 4.0,
                    px + 4.0
                );
            }
            let _ = writeln!(
                s,
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{color}\"/>"
            );
        }
    }

    // legend
    for (i, series) in spec.series.iter().enumerate() {
        let color = method_color(&series.method);
        let y = Y0 + 14.0 + i as f64 * 16.0;
        let dash = if series.flat {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
            X1 - 130.0,
            X1 - 100.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            X1 - 94.0,
            y + 4.0,
            xml_escape(&series.method)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one SVG per inferred (experiment, axis) figure into `out_dir`,
/// echoes the records to `results.csv` alongside, and returns the plot
/// paths. Same records in, same bytes out.
pub fn emit_plots(records: &[ResultRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Config("no records to plot".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_records_csv(&out_dir.join("results.csv"), records)?;

    let mut paths = Vec::new();
    for spec in plot_specs(records) {
        let path = out_dir.join(format!("{}.svg", spec.file_stem));
        std::fs::write(&path, render_svg(&spec)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
