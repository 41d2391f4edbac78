//! CSV artifacts and static SVG plots derived from them.

use std::fs::{self, OpenOptions};
use std::path::Path;

use plotters::prelude::*;
use serde::Serialize;

use crate::error::{GenddError, Result};

fn csv_err(path: &Path, e: csv::Error) -> GenddError {
    GenddError::Serialization(format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GenddError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| GenddError::io(path, e))
}

/// Appends rows to a CSV, writing the header only when the file is new.
pub fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| GenddError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| GenddError::io(path, e))
}

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> GenddError + '_ {
    move |e| GenddError::Serialization(format!("plot {}: {e}", path.display()))
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart; `log_y` plots `log10(y)` for positive values.
pub fn plot_lines(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> Result<()> {
    ensure_parent(path)?;
    let map = |y: f64| if log_y { y.max(1e-300).log10() } else { y };
    let (x0, x1) = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| map(p.1))));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err(path))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err(path))?;
    let y_desc = if log_y { format!("log10 {y_label}") } else { y_label.to_string() };
    chart.configure_mesh().x_desc(x_label).y_desc(y_desc).draw().map_err(plot_err(path))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().map(|&(x, y)| (x, map(y))), color.stroke_width(2)))
            .map_err(plot_err(path))?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err(path))?;
    }
    root.present().map_err(plot_err(path))
}

/// One bar per labelled value.
pub fn plot_bars(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> Result<()> {
    ensure_parent(path)?;
    let (_, hi) = padded_range(bars.iter().map(|b| b.1).chain(std::iter::once(0.0)));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err(path))?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..bars.len().max(1) as f64, 0f64..hi.max(1e-9))
        .map_err(plot_err(path))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(bars.len().max(1))
        .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
        .y_desc(y_label)
        .draw()
        .map_err(plot_err(path))?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, b.1.max(0.0))], Palette99::pick(i).filled())
        }))
        .map_err(plot_err(path))?;
    root.present().map_err(plot_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        step: usize,
        loss: f64,
    }

    #[test]
    fn csv_append_and_plots() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        append_csv(&path, &[Row { step: 0, loss: 1.0 }]).unwrap();
        append_csv(&path, &[Row { step: 1, loss: 0.5 }]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "step,loss\n0,1.0\n1,0.5\n");
        write_csv(&path, &[Row { step: 2, loss: 0.25 }]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "step,loss\n2,0.25\n");

        let svg = dir.path().join("p.svg");
        let s = Series { name: "loss".into(), points: vec![(0.0, 1.0), (1.0, 0.1)] };
        plot_lines(&svg, "t", "x", "y", &[s], true).unwrap();
        assert!(fs::read_to_string(&svg).unwrap().contains("<svg"));
        let bars = dir.path().join("b.svg");
        plot_bars(&bars, "t", "acc", &[("a".into(), 0.5), ("b".into(), 0.9)]).unwrap();
        assert!(fs::metadata(&bars).unwrap().len() > 0);
    }
}
