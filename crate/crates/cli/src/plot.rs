//! SVG figures for training-curve and sweep CSVs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

use cosignal::eval::SweepRow;
use cosignal::train::{CurveRow, Phase};

const SA_SHADE: RGBColor = RGBColor(206, 220, 245);
const PA_SHADE: RGBColor = RGBColor(210, 238, 210);

/// Render `path` and return the written figure paths.
pub fn plot_csv(path: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let stem = path.file_stem().map_or_else(|| "figure".into(), |s| s.to_string_lossy().into_owned());
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir)?;
    let target = dir.join(format!("{stem}.svg"));
    if headers.iter().any(|h| h == "iteration") {
        let rows: Vec<CurveRow> = reader.deserialize().collect::<Result<_, _>>()?;
        plot_curve(&rows, &target)?;
    } else if headers.iter().any(|h| h == "axis") {
        let rows: Vec<SweepRow> = reader.deserialize().collect::<Result<_, _>>()?;
        plot_sweep(&rows, &target)?;
    } else {
        bail!("{}: not a training-curve or sweep CSV", path.display());
    }
    Ok(vec![target])
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn plot_curve(rows: &[CurveRow], target: &Path) -> Result<()> {
    let root = SVGBackend::new(target, (1000, 720)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((2, 1));
    let x_max = rows.iter().map(|r| r.iteration).max().unwrap_or(1) as f64 + 0.5;
    let series: [(&str, fn(&CurveRow) -> f64); 2] =
        [("mean travel time (s)", |r| r.mean_travel_time_s), ("mean fuel (g)", |r| r.mean_fuel_g)];
    for (panel, (label, get)) in panels.iter().zip(series) {
        let (lo, hi) = range(rows.iter().map(get));
        let mut chart = ChartBuilder::on(panel)
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(60)
            .build_cartesian_2d(0.5..x_max, lo..hi)?;
        chart.configure_mesh().x_desc("iteration").y_desc(label).disable_mesh().draw()?;
        // phase shading: blue for SA iterations, green for PA
        let mut start = 0;
        while start < rows.len() {
            let phase = rows[start].phase;
            let mut end = start;
            while end + 1 < rows.len() && rows[end + 1].phase == phase {
                end += 1;
            }
            let color = if phase == Phase::Sa { SA_SHADE } else { PA_SHADE };
            let x0 = rows[start].iteration as f64 - 0.5;
            let x1 = rows[end].iteration as f64 + 0.5;
            chart.draw_series(std::iter::once(Rectangle::new([(x0, lo), (x1, hi)], color.filled())))?;
            start = end + 1;
        }
        chart.draw_series(LineSeries::new(
            rows.iter().filter(|r| get(r).is_finite()).map(|r| (r.iteration as f64, get(r))),
            BLACK.stroke_width(1),
        ))?;
    }
    root.present()?;
    Ok(())
}

fn plot_sweep(rows: &[SweepRow], target: &Path) -> Result<()> {
    let mut by_controller: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        by_controller.entry(r.controller.as_str()).or_default().push(r);
    }
    let axis = rows.first().map_or("value", |r| r.axis.as_str());
    let root = SVGBackend::new(target, (900, 720)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((2, 1));
    let (x_lo, x_hi) = range(rows.iter().map(|r| r.value));
    let series: [(&str, fn(&SweepRow) -> f64); 2] =
        [("median travel time (s)", |r| r.median_travel_time_s), ("mean fuel (g)", |r| r.mean_fuel_g)];
    for (panel, (label, get)) in panels.iter().zip(series) {
        let (lo, hi) = range(rows.iter().map(get));
        let mut chart = ChartBuilder::on(panel)
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(60)
            .build_cartesian_2d(x_lo..x_hi, lo..hi)?;
        chart.configure_mesh().x_desc(axis).y_desc(label).draw()?;
        for (k, (name, pts)) in by_controller.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            let mut pts: Vec<(f64, f64)> = pts.iter().map(|r| (r.value, get(r))).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))?;
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
    }
    root.present()?;
    Ok(())
}
