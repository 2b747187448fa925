//! SVG renderings of precision-recall curves and PCA scatters.

use std::path::Path;

use plotters::prelude::*;

use super::PrPoint;
use crate::error::{Error, Result};

const SIZE: (u32, u32) = (640, 480);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Precondition(format!("plot rendering failed: {e}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn pr_curves(path: &Path, title: &str, curves: &[(String, Vec<PrPoint>)]) -> Result<()> {
    ensure_parent(path)?;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..1f64, 0f64..1.02f64)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("recall").y_desc("precision").draw().map_err(plot_err)?;
    for (i, (label, pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut line = vec![(0.0, pts.first().map_or(1.0, |p| p.precision))];
        line.extend(pts.iter().map(|p| (p.recall, p.precision)));
        chart
            .draw_series(LineSeries::new(line, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Scatter of 2-D points coloured by class.
pub fn pca_scatter(path: &Path, title: &str, points: &[(f64, f64, usize)], class_names: &[String]) -> Result<()> {
    ensure_parent(path)?;
    let bounds = |f: fn(&(f64, f64, usize)) -> f64| {
        let (lo, hi) = points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let pad = ((hi - lo) * 0.05).max(1e-6);
        if lo.is_finite() {
            (lo - pad)..(hi + pad)
        } else {
            -1.0..1.0
        }
    };
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(bounds(|p| p.0), bounds(|p| p.1))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("PC1").y_desc("PC2").draw().map_err(plot_err)?;
    for (c, name) in class_names.iter().enumerate() {
        let color = Palette99::pick(c).to_rgba();
        chart
            .draw_series(points.iter().filter(|p| p.2 == c).map(|p| Circle::new((p.0, p.1), 3, color.filled())))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| Circle::new((x + 8, y), 3, color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![PrPoint { threshold: 0.9, recall: 0.5, precision: 1.0 }, PrPoint { threshold: 0.1, recall: 1.0, precision: 0.5 }];
        pr_curves(&dir.path().join("pr.svg"), "pr", &[("m".into(), pts)]).unwrap();
        let names = vec!["real".to_string(), "fake".to_string()];
        pca_scatter(&dir.path().join("pca.svg"), "pca", &[(0.0, 1.0, 0), (1.0, 0.0, 1)], &names).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("pca.svg")).unwrap();
        assert!(svg.contains("<svg"));
    }
}
