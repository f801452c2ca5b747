//! PNG figures from the files under an output root.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};
use vsrdistill_core::eval::Profile;
use vsrdistill_core::train::TrainLog;

use crate::error::{io_err, LabError, LabResult};

const FONT_DIRS: &[&str] = &["/usr/share/fonts/truetype/dejavu", "/usr/share/fonts/dejavu", "/usr/share/fonts/TTF"];
const SIZE: (u32, u32) = (900, 520);

static FONT: OnceLock<bool> = OnceLock::new();

/// Registers DejaVu Sans as the sans-serif face if it can be found. Without a
/// font, figures are still written but carry no text.
fn ensure_font() -> bool {
    *FONT.get_or_init(|| {
        FONT_DIRS.iter().any(|dir| match std::fs::read(Path::new(dir).join("DejaVuSans.ttf")) {
            Ok(bytes) => register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice())).is_ok(),
            Err(_) => false,
        })
    })
}

fn draw_err(path: &Path, e: impl std::fmt::Display) -> LabError {
    LabError::Format { path: path.to_path_buf(), detail: format!("plotting failed: {e}") }
}

fn ensure_parent(path: &Path) -> LabResult<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(io_err(dir)),
        None => Ok(()),
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Line plot of named series against their index.
pub fn line_plot(path: &Path, title: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> LabResult<()> {
    ensure_parent(path)?;
    let text = ensure_font();
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let len = series.iter().map(|s| s.1.len()).max().unwrap_or(1).max(2);
    let (lo, hi) = bounds(series.iter().flat_map(|s| s.1.iter().copied()));
    let mut b = ChartBuilder::on(&root);
    b.margin(12).x_label_area_size(36).y_label_area_size(64);
    if text {
        b.caption(title, ("sans-serif", 20));
    }
    let mut chart = b.build_cartesian_2d(0f64..(len - 1) as f64, lo..hi).map_err(|e| draw_err(path, e))?;
    if text {
        chart.configure_mesh().x_desc("update").y_desc(y_label).draw().map_err(|e| draw_err(path, e))?;
    } else {
        chart.configure_mesh().disable_x_mesh().draw().map_err(|e| draw_err(path, e))?;
    }
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let pts = ys.iter().enumerate().filter(|(_, y)| y.is_finite()).map(|(i, y)| (i as f64, *y));
        let s = chart.draw_series(LineSeries::new(pts, color.stroke_width(2))).map_err(|e| draw_err(path, e))?;
        if text {
            s.label(name.as_str()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
    }
    if text && series.len() > 1 {
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw().map_err(|e| draw_err(path, e))?;
    }
    root.present().map_err(|e| draw_err(path, e))
}

/// Bar chart of one value per label.
pub fn bar_plot(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> LabResult<()> {
    ensure_parent(path)?;
    let text = ensure_font();
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let (lo, hi) = bounds(bars.iter().map(|b| b.1).chain([bars.iter().map(|b| b.1).fold(f64::INFINITY, f64::min) - 0.5]));
    let n = bars.len().max(1);
    let mut b = ChartBuilder::on(&root);
    b.margin(12).x_label_area_size(48).y_label_area_size(64);
    if text {
        b.caption(title, ("sans-serif", 20));
    }
    let mut chart = b.build_cartesian_2d((0..n).into_segmented(), lo..hi).map_err(|e| draw_err(path, e))?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let fmt = move |v: &SegmentValue<usize>| match v {
        SegmentValue::CenterOf(i) | SegmentValue::Exact(i) => labels.get(*i).cloned().unwrap_or_default(),
        SegmentValue::Last => String::new(),
    };
    if text {
        chart.configure_mesh().disable_x_mesh().y_desc(y_label).x_label_formatter(&fmt).draw().map_err(|e| draw_err(path, e))?;
    }
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            let mut r = Rectangle::new([(SegmentValue::Exact(i), lo), (SegmentValue::Exact(i + 1), *v)], Palette99::pick(i).filled());
            r.set_margin(0, 0, 12, 12);
            r
        }))
        .map_err(|e| draw_err(path, e))?;
    root.present().map_err(|e| draw_err(path, e))
}

/// Side-by-side grayscale images of temporal profiles (frames down, pixels
/// across), first channel, values clamped to [0, 1].
pub fn profile_strip(path: &Path, panels: &[(String, Profile)]) -> LabResult<()> {
    const SCALE: u32 = 12;
    const GAP: u32 = 8;
    let Some(first) = panels.first() else { return Ok(()) };
    ensure_parent(path)?;
    let (pw, ph) = (first.1.cols as u32 * SCALE, first.1.rows as u32 * SCALE);
    let width = panels.len() as u32 * (pw + GAP) + GAP;
    let root = BitMapBackend::new(path, (width, ph + 2 * GAP + 24)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let text = ensure_font();
    for (k, (name, p)) in panels.iter().enumerate() {
        let x0 = GAP + k as u32 * (pw + GAP);
        for r in 0..p.rows {
            for c in 0..p.cols {
                let v = (p.at(r, c, 0).clamp(0.0, 1.0) * 255.0).round() as u8;
                let (x, y) = ((x0 + c as u32 * SCALE) as i32, (GAP + r as u32 * SCALE) as i32);
                root.draw(&Rectangle::new([(x, y), (x + SCALE as i32, y + SCALE as i32)], RGBColor(v, v, v).filled()))
                    .map_err(|e| draw_err(path, e))?;
            }
        }
        if text {
            root.draw(&Text::new(name.clone(), (x0 as i32, (ph + GAP + 4) as i32), ("sans-serif", 14)))
                .map_err(|e| draw_err(path, e))?;
        }
    }
    root.present().map_err(|e| draw_err(path, e))
}

/// Loss and gradient-norm curves of one stage log: one figure per column.
pub fn log_figures(dir: &Path, stage: &str, log: &TrainLog) -> LabResult<Vec<PathBuf>> {
    let mut phases: Vec<String> = log.rows.iter().map(|r| r.phase.clone()).collect();
    phases.dedup();
    phases.sort();
    phases.dedup();
    let mut written = Vec::new();
    for col in log.columns.iter() {
        let series: Vec<(String, Vec<f64>)> = phases
            .iter()
            .map(|ph| (ph.clone(), log.series(col, |p| p == ph)))
            .filter(|(_, ys)| ys.iter().any(|y| y.is_finite()))
            .collect();
        if series.is_empty() {
            continue;
        }
        let path = dir.join(format!("{stage}_{col}.png"));
        line_plot(&path, &format!("{stage}: {col}"), col, &series)?;
        written.push(path);
    }
    Ok(written)
}
