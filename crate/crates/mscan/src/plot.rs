//! Raster plots of ROC curves and per-epoch training loss.
//!
//! Plotters draws into an RGB buffer that is then written as PNG. No font
//! backend is compiled in, so the images carry no text; every image gets a
//! row per series in `legend.csv` naming its colour, and the ROC points are
//! also written as `roc_points.csv`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use mscan_core::{Grade, NUM_CLASSES};
use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::trainer::{metrics_path, read_predictions, MetricsLog};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;

const PALETTE: [(&str, RGBColor); 6] = [
    ("blue", RGBColor(31, 119, 180)),
    ("orange", RGBColor(255, 127, 14)),
    ("green", RGBColor(44, 160, 44)),
    ("red", RGBColor(214, 39, 40)),
    ("purple", RGBColor(148, 103, 189)),
    ("brown", RGBColor(140, 86, 75)),
];
const GRID: RGBColor = RGBColor(225, 225, 225);
const AXIS: RGBColor = RGBColor(90, 90, 90);

/// One line on a plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// ROC operating points from the highest threshold down, starting at (0, 0)
/// and ending at (1, 1). Tied scores move both rates in one step, so the
/// trapezoid area under the points equals the tie-aware AUROC.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Option<Vec<(f64, f64)>> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Some(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// One-vs-rest ROC per grade plus the binary NormalMild-versus-rest curve,
/// pooled over levels. Curves with a single class present are left out.
pub fn roc_series(rows: &[([f64; NUM_CLASSES], usize)]) -> Vec<Series> {
    let mut out = Vec::new();
    for c in 0..NUM_CLASSES {
        let s: Vec<f64> = rows.iter().map(|(p, _)| p[c]).collect();
        let l: Vec<bool> = rows.iter().map(|&(_, y)| y == c).collect();
        if let Some(points) = roc_curve(&s, &l) {
            let name = Grade::from_index(c).expect("class index").as_str().to_string();
            out.push(Series { name, points });
        }
    }
    let s: Vec<f64> = rows.iter().map(|(p, _)| p[1] + p[2]).collect();
    let l: Vec<bool> = rows.iter().map(|&(_, y)| y > 0).collect();
    if let Some(points) = roc_curve(&s, &l) {
        out.push(Series { name: "binary".into(), points });
    }
    out
}

/// log10 loss per epoch, one series per model in log order.
pub fn loss_series(log: &MetricsLog) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for (model, e) in &log.rows {
        let point = (e.epoch as f64, e.loss.max(1e-12).log10());
        match out.iter_mut().find(|s| &s.name == model) {
            Some(s) => s.points.push(point),
            None => out.push(Series { name: model.clone(), points: vec![point] }),
        }
    }
    out
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0 < x1) {
        (x0, x1) = (x0 - 0.5, x0 + 0.5);
    }
    if !(y0 < y1) {
        (y0, y1) = (y0 - 0.5, y0 + 0.5);
    }
    let pad = (y1 - y0) * 0.05;
    ((x0, x1), (y0 - pad, y1 + pad))
}

/// Renders line series on a plain grid into an RGB buffer. `diagonal` adds
/// the chance line of an ROC plot.
pub fn render(series: &[Series], x: (f64, f64), y: (f64, f64), diagonal: bool) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; (WIDTH * HEIGHT * 3) as usize];
    let fail = |e: &dyn std::fmt::Display| Error::output("<plot>", e.to_string());
    {
        let root = BitMapBackend::with_buffer(&mut buf, (WIDTH, HEIGHT)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| fail(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(24)
            .build_cartesian_2d(x.0..x.1, y.0..y.1)
            .map_err(|e| fail(&e))?;
        let grid = |a: f64, b: f64, i: u32| a + (b - a) * f64::from(i) / 10.0;
        for i in 0..=10 {
            let (gx, gy) = (grid(x.0, x.1, i), grid(y.0, y.1, i));
            let color = if i == 0 { AXIS } else { GRID };
            chart.draw_series(LineSeries::new([(gx, y.0), (gx, y.1)], color)).map_err(|e| fail(&e))?;
            chart.draw_series(LineSeries::new([(x.0, gy), (x.1, gy)], color)).map_err(|e| fail(&e))?;
        }
        if diagonal {
            chart
                .draw_series(LineSeries::new([(x.0, y.0), (x.1, y.1)], AXIS.mix(0.6)))
                .map_err(|e| fail(&e))?;
        }
        for (s, (_, color)) in series.iter().zip(PALETTE.iter().cycle()) {
            let style = ShapeStyle::from(*color).stroke_width(2);
            chart.draw_series(LineSeries::new(s.points.iter().copied(), style)).map_err(|e| fail(&e))?;
        }
        root.present().map_err(|e| fail(&e))?;
    }
    Ok(buf)
}

pub fn write_png(path: &Path, rgb: &[u8], width: u32, height: u32) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::output(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::output(path, e))?;
    w.write_image_data(rgb).map_err(|e| Error::output(path, e))?;
    w.finish().map_err(|e| Error::output(path, e))
}

/// Files written by [`plot_run`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotFiles {
    pub images: Vec<PathBuf>,
    pub tables: Vec<PathBuf>,
}

/// Draws every metrics log present in `run` and, when `predictions.csv`
/// exists, the ROC curves, into `dest`.
pub fn plot_run(run: &Path, dest: &Path) -> Result<PlotFiles> {
    std::fs::create_dir_all(dest).map_err(|e| Error::output(dest, e))?;
    let mut files = PlotFiles::default();
    let mut legend: Vec<[String; 3]> = Vec::new();
    let mut add_legend = |file: &str, series: &[Series]| {
        for (s, (color, _)) in series.iter().zip(PALETTE.iter().cycle()) {
            legend.push([file.to_string(), s.name.clone(), color.to_string()]);
        }
    };
    for stage in 1..=3u8 {
        let path = metrics_path(run, stage);
        if !path.is_file() {
            continue;
        }
        let series = loss_series(&MetricsLog::read(&path)?);
        if series.is_empty() {
            continue;
        }
        let name = format!("loss_stage{stage}.png");
        let (x, y) = bounds(&series);
        let img = dest.join(&name);
        write_png(&img, &render(&series, x, y, false)?, WIDTH, HEIGHT)?;
        add_legend(&name, &series);
        files.images.push(img);
    }
    let preds = run.join("predictions.csv");
    if preds.is_file() {
        let series = roc_series(&read_predictions(&preds)?);
        let img = dest.join("roc.png");
        write_png(&img, &render(&series, (0.0, 1.0), (0.0, 1.0), true)?, WIDTH, HEIGHT)?;
        add_legend("roc.png", &series);
        files.images.push(img);
        let table = dest.join("roc_points.csv");
        let mut w = csv::Writer::from_path(&table).map_err(|e| Error::output(&table, e))?;
        w.write_record(["series", "fpr", "tpr"]).map_err(|e| Error::output(&table, e))?;
        for s in &series {
            for (fpr, tpr) in &s.points {
                w.write_record([s.name.clone(), fpr.to_string(), tpr.to_string()])
                    .map_err(|e| Error::output(&table, e))?;
            }
        }
        w.flush().map_err(|e| Error::output(&table, e))?;
        files.tables.push(table);
    }
    if files.images.is_empty() {
        return Err(Error::MissingCheckpoint(metrics_path(run, 1)));
    }
    let table = dest.join("legend.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| Error::output(&table, e))?;
    w.write_record(["file", "series", "color"]).map_err(|e| Error::output(&table, e))?;
    for row in &legend {
        w.write_record(row).map_err(|e| Error::output(&table, e))?;
    }
    w.flush().map_err(|e| Error::output(&table, e))?;
    files.tables.push(table);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mscan_core::metrics::auroc;

    #[test]
    fn roc_area_matches_auroc_with_ties() {
        let scores = [0.9, 0.8, 0.8, 0.7, 0.5, 0.5, 0.5, 0.1];
        let labels = [true, true, false, true, false, true, false, false];
        let pts = roc_curve(&scores, &labels).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        assert!((trapezoid_area(&pts) - auroc(&scores, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn roc_needs_both_classes() {
        assert!(roc_curve(&[0.1, 0.2], &[true, true]).is_none());
    }

    #[test]
    fn render_fills_the_buffer() {
        let s = [Series { name: "a".into(), points: vec![(0.0, 0.0), (1.0, 1.0)] }];
        let buf = render(&s, (0.0, 1.0), (0.0, 1.0), true).unwrap();
        assert_eq!(buf.len(), (WIDTH * HEIGHT * 3) as usize);
        assert!(buf.chunks(3).any(|p| p == [31, 119, 180]));
    }
}
