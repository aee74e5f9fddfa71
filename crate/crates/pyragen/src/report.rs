//! Per-level evaluation output: the TSV table and a small trend plot.

use std::path::Path;

use plotters::prelude::*;
use pyragen_core::eval::LevelReport;

use crate::error::{io_err, Error, Result};

pub fn write_tsv(path: &Path, report: &LevelReport) -> Result<()> {
    std::fs::write(path, report.to_tsv()).map_err(io_err(path))
}

/// Values rescaled to `[0, 1]` for plotting on a shared axis.
fn normalized(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.5 })
        .collect()
}

/// Line plot of FID (red) and diversity (blue) against level, fine to deep,
/// each rescaled to its own range. The plot carries no text; the TSV holds
/// the numbers.
pub fn write_plot(path: &Path, report: &LevelReport) -> Result<()> {
    let plot_err = |e: String| Error::Png(format!("plot {}: {e}", path.display()));
    let n = report.rows.len();
    if n == 0 {
        return Err(plot_err("report has no rows".into()));
    }
    let fid = normalized(&report.rows.iter().map(|r| r.fid).collect::<Vec<_>>());
    let div = normalized(&report.rows.iter().map(|r| r.diversity).collect::<Vec<_>>());
    let (w, h) = (480u32, 320u32);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let x_max = (n.max(2) - 1) as f64;
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .build_cartesian_2d(-0.1..x_max + 0.1, -0.05..1.05)
            .map_err(|e| plot_err(e.to_string()))?;
        for (series, color) in [(&fid, RED), (&div, BLUE)] {
            let points: Vec<(f64, f64)> = series
                .iter()
                .enumerate()
                .map(|(i, &v)| (i as f64, v))
                .collect();
            chart
                .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
                .map_err(|e| plot_err(e.to_string()))?;
            chart
                .draw_series(
                    points
                        .into_iter()
                        .map(|p| Circle::new(p, 4, color.filled())),
                )
                .map_err(|e| plot_err(e.to_string()))?;
        }
        root.present().map_err(|e| plot_err(e.to_string()))?;
    }
    let image = pyragen_core::image::Image::from_rgb8(w as usize, h as usize, &buf)?;
    crate::imageio::write_image(path, &image)
}
