//! SVG plots rebuilt from the CSV logs of an output directory.
//!
//! The plots read nothing but the files on disk, so running [`plot_dir`] on a
//! finished directory reproduces them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::experiment::TRAJECTORY_DIR;

pub const PLOT_FILES: [&str; 4] = ["grad_norm.svg", "theta_distance.svg", "cost.svg", "trajectories.svg"];

/// Columns of one run log that the plots use.
#[derive(Debug, Clone)]
pub struct RunTable {
    pub method: String,
    pub seed: String,
    pub iter: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub j_hat: Vec<f64>,
    pub dist_to_opt: Vec<f64>,
}

fn parse_cell(s: &str) -> f64 {
    s.trim().parse().unwrap_or(f64::NAN)
}

/// Reads a run log; returns `None` for CSV files of another kind.
pub fn read_run_csv(path: &Path) -> Result<Option<RunTable>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(i_iter), Some(i_grad), Some(i_j), Some(i_dist), Some(i_method), Some(i_seed)) = (
        col("iter"),
        col("grad_norm"),
        col("J_hat"),
        col("dist_to_opt"),
        col("method"),
        col("seed"),
    ) else {
        return Ok(None);
    };
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let (default_method, default_seed) = stem.rsplit_once('_').unwrap_or((stem, ""));
    let mut t = RunTable {
        method: default_method.to_string(),
        seed: default_seed.to_string(),
        iter: Vec::new(),
        grad_norm: Vec::new(),
        j_hat: Vec::new(),
        dist_to_opt: Vec::new(),
    };
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if n == 0 {
            t.method = rec[i_method].to_string();
            t.seed = rec[i_seed].to_string();
        }
        t.iter.push(parse_cell(&rec[i_iter]));
        t.grad_norm.push(parse_cell(&rec[i_grad]));
        t.j_hat.push(parse_cell(&rec[i_j]));
        t.dist_to_opt.push(parse_cell(&rec[i_dist]));
    }
    Ok(Some(t))
}

/// Episode-0 state norms `‖s_k‖` from a trajectory dump.
pub fn read_state_norms(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let states: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.strip_prefix('s').is_some_and(|d| d.parse::<usize>().is_ok()))
        .map(|(i, _)| i)
        .collect();
    let (Some(i_ep), Some(i_k)) = (
        header.iter().position(|h| h == "episode"),
        header.iter().position(|h| h == "k"),
    ) else {
        return Ok(Vec::new());
    };
    let mut pts = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec[i_ep].trim() != "0" {
            continue;
        }
        let norm = states.iter().map(|&i| parse_cell(&rec[i]).powi(2)).sum::<f64>().sqrt();
        pts.push((parse_cell(&rec[i_k]), norm));
    }
    Ok(pts)
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("plotting failed: {e}")))
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    color: RGBColor,
}

fn shade(method: &str, index: usize) -> RGBColor {
    let base = if method == "quasi-newton" { (31u8, 119u8, 180u8) } else { (214u8, 39u8, 40u8) };
    let t = (0.28 * index as f64).min(0.75);
    let mix = |c: u8| (c as f64 + (255.0 - c as f64) * t).round() as u8;
    RGBColor(mix(base.0), mix(base.1), mix(base.2))
}

/// Line chart on a logarithmic y axis; non-positive and non-finite points
/// are dropped.
fn log_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: Vec<Series>) -> Result<()> {
    let series: Vec<Series> = series
        .into_iter()
        .map(|s| Series {
            points: s
                .points
                .into_iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && *y > 0.0)
                .collect(),
            ..s
        })
        .collect();
    let all = series.iter().flat_map(|s| s.points.iter().copied());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let caption = if x0.is_finite() { title.to_string() } else { format!("{title} (no data)") };
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 1.0, 10.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 * 1.0001 {
        y0 /= 2.0;
        y1 *= 2.0;
    }

    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(80)
        .build_cartesian_2d(x0..x1, (y0..y1).log_scale())
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .y_label_formatter(&|v| format!("{v:.1e}"))
        .draw()
        .map_err(plot_err)?;
    let mut labelled = false;
    for s in series {
        if s.points.is_empty() {
            continue;
        }
        let color = s.color;
        chart
            .draw_series(LineSeries::new(s.points, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        labelled = true;
    }
    if labelled {
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperRight)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Regenerates the four plots of an output directory from its CSV logs.
pub fn plot_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Input(format!("{} is not a directory", dir.display())));
    }
    let mut runs = Vec::new();
    for path in csv_files(dir)? {
        if let Some(t) = read_run_csv(&path)? {
            runs.push(t);
        }
    }
    if runs.is_empty() {
        return Err(Error::Input(format!("no run logs found in {}", dir.display())));
    }
    runs.sort_by(|a, b| (&a.method, a.seed.parse::<u64>().ok(), &a.seed).cmp(&(&b.method, b.seed.parse::<u64>().ok(), &b.seed)));

    let mut index_in_method = Vec::with_capacity(runs.len());
    for (i, r) in runs.iter().enumerate() {
        index_in_method.push(runs[..i].iter().filter(|q| q.method == r.method).count());
    }
    let series_of = |pick: fn(&RunTable) -> &Vec<f64>| -> Vec<Series> {
        runs.iter()
            .zip(&index_in_method)
            .map(|(r, &k)| Series {
                label: format!("{} seed {}", r.method, r.seed),
                points: r.iter.iter().copied().zip(pick(r).iter().copied()).collect(),
                color: shade(&r.method, k),
            })
            .collect()
    };

    let out: Vec<PathBuf> = PLOT_FILES.iter().map(|f| dir.join(f)).collect();
    log_chart(&out[0], "Policy-gradient norm", "iteration", "‖∇J‖", series_of(|r| &r.grad_norm))?;
    log_chart(&out[1], "Distance to the optimal parameters", "iteration", "‖θ − θ⋆‖", series_of(|r| &r.dist_to_opt))?;
    log_chart(&out[2], "Sampled discounted cost", "iteration", "Ĵ", series_of(|r| &r.j_hat))?;

    let mut traj = Vec::new();
    let tdir = dir.join(TRAJECTORY_DIR);
    let mut seen = Vec::new();
    for r in &runs {
        if seen.contains(&r.method) {
            continue;
        }
        seen.push(r.method.clone());
        for (which, light) in [("first", true), ("last", false)] {
            let p = tdir.join(format!("{}_{}_{which}.csv", r.method, r.seed));
            if p.exists() {
                traj.push(Series {
                    label: format!("{} seed {} {which} batch", r.method, r.seed),
                    points: read_state_norms(&p)?,
                    color: shade(&r.method, if light { 2 } else { 0 }),
                });
            }
        }
    }
    log_chart(&out[3], "Episode 0 of the first and last batch", "step k", "‖s_k‖", traj)?;
    Ok(out)
}
