use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Result};
use mthd_core::froc_eval::EvalReport;
use plotters::prelude::*;

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting: {e}")
}

/// Left: FROC curve of every report. Right: average sensitivity against
/// labeled fraction, one series per label.
pub fn render(reports: &[EvalReport], out: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(anyhow!("no reports to plot"));
    }
    let root = SVGBackend::new(out, (1100, 460)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let (left, right) = root.split_horizontally(560);

    let max_fp = reports
        .iter()
        .flat_map(|r| r.fp_points.iter().copied())
        .fold(1.0, f64::max);
    let mut froc = ChartBuilder::on(&left)
        .caption("FROC", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.0..max_fp, 0.0..1.0)
        .map_err(err)?;
    froc.configure_mesh()
        .x_desc("false positives per study")
        .y_desc("sensitivity")
        .draw()
        .map_err(err)?;
    for (i, r) in reports.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        // step function through the operating points, extended to the edge
        let mut pts = vec![(0.0, 0.0)];
        for p in &r.curve {
            let last = pts.last().copied().unwrap_or((0.0, 0.0));
            pts.push((p.mean_fp.min(max_fp), last.1));
            pts.push((p.mean_fp.min(max_fp), p.sensitivity));
        }
        let tail = pts.last().map(|p| p.1).unwrap_or(0.0);
        pts.push((max_fp, tail));
        let label = match r.labeled_fraction {
            Some(f) => format!("{} ({:.0}% labeled)", r.label, 100.0 * f),
            None => r.label.clone(),
        };
        froc.draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(err)?
            .label(label)
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
        froc.draw_series(
            r.fp_points
                .iter()
                .zip(&r.sensitivities)
                .map(|(&x, &y)| Circle::new((x, y), 3, color.filled())),
        )
        .map_err(err)?;
    }
    froc.configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;

    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in reports {
        if let Some(f) = r.labeled_fraction {
            series.entry(&r.label).or_default().push((f, r.average));
        }
    }
    let mut ratio = ChartBuilder::on(&right)
        .caption("average sensitivity", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.0..1.0, 0.0..1.0)
        .map_err(err)?;
    ratio
        .configure_mesh()
        .x_desc("labeled fraction")
        .y_desc("average sensitivity")
        .draw()
        .map_err(err)?;
    for (i, (label, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = Palette99::pick(i).to_rgba();
        ratio
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(err)?
            .label(label)
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
        ratio
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(err)?;
    }
    ratio
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}
