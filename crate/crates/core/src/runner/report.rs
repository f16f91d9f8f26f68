//! Results tables and plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use super::{Family, FeatureSet, RunArtifacts, TABLE_ROWS};
use crate::dataset::{ImageType, Split, Target};
use crate::error::{Error, Result};
use crate::eval::{sig4, Metrics};

/// Files written by [`emit_report`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    /// One wide table per image type and seed.
    pub tables: Vec<PathBuf>,
    /// Seed-averaged wide tables (only with several seeds).
    pub mean_tables: Vec<PathBuf>,
    pub long: PathBuf,
    pub intervals: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Target column groups of the wide table, in table order.
pub const TABLE_TARGETS: [Target; 3] = [Target::OpAa, Target::OpDtt, Target::Pm10];

pub fn table_header() -> Vec<String> {
    let mut h = vec!["Model".to_string(), "Features".to_string()];
    for t in TABLE_TARGETS {
        for m in ["R2", "RMSE", "NMAE"] {
            h.push(format!("{} {m}", t.label()));
        }
    }
    h
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("plot {}: {e}", path.display()))
}

/// Common axis range of a set of values, padded by 5%.
pub fn axis_limits(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Observed versus estimated, one panel per split, with the identity line.
/// Both axes of every panel span `limits`.
pub fn scatter_plot(path: &Path, run: &RunArtifacts, limits: (f64, f64)) -> Result<()> {
    let (lo, hi) = limits;
    let root = SVGBackend::new(path, (1200, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let c = &run.config;
    let title = format!(
        "{} {} {} ({}, seed {}) [{}]",
        c.family.label(),
        c.features,
        c.target.label(),
        c.image_type,
        c.seed,
        run.config_hash
    );
    let root = root.titled(&title, ("sans-serif", 18)).map_err(|e| plot_err(path, e))?;
    let panels = root.split_evenly((1, 3));
    for (panel, split) in panels.iter().zip(Split::ALL) {
        let pts: Vec<(f64, f64)> = run
            .predictions
            .iter()
            .filter(|p| p.split == split)
            .map(|p| (p.observed, p.estimated))
            .collect();
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("{split} (n = {})", pts.len()), ("sans-serif", 14))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(lo..hi, lo..hi)
            .map_err(|e| plot_err(path, e))?;
        chart
            .configure_mesh()
            .x_desc("observed")
            .y_desc("estimated")
            .draw()
            .map_err(|e| plot_err(path, e))?;
        chart
            .draw_series(LineSeries::new([(lo, lo), (hi, hi)], BLACK.stroke_width(1)))
            .map_err(|e| plot_err(path, e))?;
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 2, BLUE.mix(0.6).filled())))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Training and validation loss per epoch, with a dotted vertical line at
/// the epoch of minimum validation loss.
pub fn loss_plot(path: &Path, run: &RunArtifacts) -> Result<()> {
    let h = &run.history;
    let epochs = h.train_loss.len().max(1) as f64;
    let (_, hi) = axis_limits(h.train_loss.iter().chain(&h.val_loss).copied());
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let c = &run.config;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("{} {} {} [{}]", c.family.label(), c.features, c.target.label(), run.config_hash),
            ("sans-serif", 16),
        )
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(1.0..epochs.max(2.0), 0.0..hi.max(1e-12))
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("MSE")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let series = |v: &[f64]| -> Vec<(f64, f64)> { v.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect() };
    chart
        .draw_series(LineSeries::new(series(&h.train_loss), BLUE.stroke_width(2)))
        .map_err(|e| plot_err(path, e))?
        .label("train")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], BLUE));
    chart
        .draw_series(LineSeries::new(series(&h.val_loss), RED.stroke_width(2)))
        .map_err(|e| plot_err(path, e))?
        .label("validation")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], RED));
    let best = h.best_epoch as f64;
    chart
        .draw_series(DashedLineSeries::new([(best, 0.0), (best, hi)], 2, 4, BLACK.into()))
        .map_err(|e| plot_err(path, e))?
        .label(format!("best epoch {}", h.best_epoch))
        .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], BLACK));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

#[derive(Serialize)]
struct LongRow<'a> {
    config_hash: &'a str,
    model: &'a str,
    features: &'a str,
    target: &'a str,
    image_type: &'a str,
    seed: u64,
    split: &'a str,
    n: usize,
    r2: String,
    rmse: String,
    nmae: String,
}

#[derive(Serialize)]
struct IntervalRow<'a> {
    config_hash: &'a str,
    model: &'a str,
    features: &'a str,
    target: &'a str,
    image_type: &'a str,
    seed: u64,
    split: &'a str,
    metric: &'a str,
    point: String,
    lower: String,
    upper: String,
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

type Cell = BTreeMap<Target, Metrics>;

/// Wide rows in table order; rows never run are left out and missing
/// targets are blank.
fn wide_rows(cells: &BTreeMap<(Family, FeatureSet), Cell>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for key in TABLE_ROWS.iter().chain(cells.keys().filter(|k| !TABLE_ROWS.contains(k))) {
        let Some(cell) = cells.get(key) else { continue };
        let mut r = vec![key.0.label().to_string(), key.1.as_str().to_string()];
        for t in TABLE_TARGETS {
            match cell.get(&t) {
                Some(m) => r.extend([sig4(m.r2), sig4(m.rmse), sig4(m.nmae)]),
                None => r.extend([String::new(), String::new(), String::new()]),
            }
        }
        rows.push(r);
    }
    rows
}

/// Writes, under `out`:
/// - `table_<image>_s<seed>.csv`: test-split R²/RMSE/NMAE laid out as the
///   results table (rows = model × features, column groups =
///   targets), one file per image type and seed;
/// - `table_<image>_mean.csv` when several seeds ran: per-cell means over
///   seeds (an extension, labelled as such by its name);
/// - `metrics_long.csv`: one row per model × features × target × split;
/// - `intervals_long.csv`: bootstrap intervals;
/// - per-run scatter plots whose axes share limits across all runs of a
///   target, and per-run loss curves.
pub fn emit_report(runs: &[RunArtifacts], out: &Path) -> Result<ReportFiles> {
    if runs.is_empty() {
        return Err(Error::InvalidInput("no runs to report".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = ReportFiles {
        long: out.join("metrics_long.csv"),
        intervals: out.join("intervals_long.csv"),
        ..Default::default()
    };

    let mut groups: BTreeMap<(ImageType, u64), BTreeMap<(Family, FeatureSet), Cell>> = BTreeMap::new();
    for run in runs {
        let c = &run.config;
        if let Some(m) = run.metrics(Split::Test) {
            groups
                .entry((c.image_type, c.seed))
                .or_default()
                .entry((c.family, c.features))
                .or_default()
                .insert(c.target, m.metrics.clone());
        }
    }
    let header = table_header();
    for ((image, seed), cells) in &groups {
        let p = out.join(format!("table_{}_s{seed}.csv", image.as_str().to_ascii_lowercase()));
        write_rows(&p, &header, &wide_rows(cells))?;
        files.tables.push(p);
    }
    let images: Vec<ImageType> = {
        let mut v: Vec<ImageType> = groups.keys().map(|k| k.0).collect();
        v.dedup();
        v
    };
    for image in images {
        let seeded: Vec<&BTreeMap<(Family, FeatureSet), Cell>> =
            groups.iter().filter(|(k, _)| k.0 == image).map(|(_, v)| v).collect();
        if seeded.len() < 2 {
            continue;
        }
        let mut sums: BTreeMap<(Family, FeatureSet), BTreeMap<Target, (Metrics, usize)>> = BTreeMap::new();
        for cells in &seeded {
            for (key, cell) in cells.iter() {
                for (t, m) in cell {
                    let e = sums.entry(*key).or_default().entry(*t).or_insert((
                        Metrics {
                            n: 0,
                            r2: 0.0,
                            rmse: 0.0,
                            nmae: 0.0,
                        },
                        0,
                    ));
                    e.0.n += m.n;
                    e.0.r2 += m.r2;
                    e.0.rmse += m.rmse;
                    e.0.nmae += m.nmae;
                    e.1 += 1;
                }
            }
        }
        let means: BTreeMap<(Family, FeatureSet), Cell> = sums
            .into_iter()
            .map(|(k, cell)| {
                let cell = cell
                    .into_iter()
                    .map(|(t, (m, k))| {
                        let k = k as f64;
                        (
                            t,
                            Metrics {
                                n: m.n,
                                r2: m.r2 / k,
                                rmse: m.rmse / k,
                                nmae: m.nmae / k,
                            },
                        )
                    })
                    .collect();
                (k, cell)
            })
            .collect();
        let p = out.join(format!("table_{}_mean.csv", image.as_str().to_ascii_lowercase()));
        write_rows(&p, &header, &wide_rows(&means))?;
        files.mean_tables.push(p);
    }

    let mut long = Vec::new();
    let mut intervals = Vec::new();
    for run in runs {
        let c = &run.config;
        for m in &run.metrics {
            long.push(LongRow {
                config_hash: &run.config_hash,
                model: c.family.label(),
                features: c.features.as_str(),
                target: c.target.as_str(),
                image_type: c.image_type.as_str(),
                seed: c.seed,
                split: &m.split,
                n: m.metrics.n,
                r2: sig4(m.metrics.r2),
                rmse: sig4(m.metrics.rmse),
                nmae: sig4(m.metrics.nmae),
            });
        }
        for i in &run.intervals {
            intervals.push(IntervalRow {
                config_hash: &run.config_hash,
                model: c.family.label(),
                features: c.features.as_str(),
                target: c.target.as_str(),
                image_type: c.image_type.as_str(),
                seed: c.seed,
                split: i.split.as_str(),
                metric: i.ci.metric.as_str(),
                point: sig4(i.ci.point),
                lower: sig4(i.ci.lower),
                upper: sig4(i.ci.upper),
            });
        }
    }
    crate::dataset::io::write_csv(&files.long, &long)?;
    crate::dataset::io::write_csv(&files.intervals, &intervals)?;

    let mut limits: BTreeMap<Target, (f64, f64)> = BTreeMap::new();
    for t in Target::ALL {
        let values = runs
            .iter()
            .filter(|r| r.config.target == t)
            .flat_map(|r| r.predictions.iter().flat_map(|p| [p.observed, p.estimated]));
        limits.insert(t, axis_limits(values));
    }
    let plots = out.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    for run in runs {
        let stem = format!("{}_{}", run.config.run_name(), run.config_hash);
        let s = plots.join(format!("scatter_{stem}.svg"));
        scatter_plot(&s, run, limits[&run.config.target])?;
        let l = plots.join(format!("loss_{stem}.svg"));
        loss_plot(&l, run)?;
        files.plots.extend([s, l]);
    }
    Ok(files)
}
