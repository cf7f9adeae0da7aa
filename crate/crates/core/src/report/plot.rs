use std::path::Path;

use plotters::prelude::*;

use crate::train::RunMetrics;
use crate::{Error, Result};

const SIZE: (u32, u32) = (640, 420);

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Runtime(format!("plotting {}: {e}", path.display()))
}

/// Line plot of named `(epoch, value)` series as SVG.
pub fn line_plot(path: &Path, title: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let points = || series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1) = points().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = points().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1.0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let err = plot_err(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(y_label)
        .draw()
        .map_err(&err)?;
    let colors = [BLUE, RED, GREEN, MAGENTA];
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(&err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// `loss.svg` plus `top1.svg` (classifier runs) or `bpp.svg` (codec runs)
/// in `dir`. Returns the written paths.
pub fn plot_run(metrics: &RunMetrics, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let ep = |f: &dyn Fn(&crate::train::EpochMetrics) -> Option<f64>| -> Vec<(f64, f64)> {
        metrics
            .epochs
            .iter()
            .filter_map(|e| f(e).map(|v| (e.epoch as f64, v)))
            .collect()
    };
    let loss = dir.join("loss.svg");
    line_plot(
        &loss,
        "Training and validation loss",
        "loss",
        &[
            ("train", ep(&|e| Some(e.train_loss))),
            ("val", ep(&|e| Some(e.val_loss))),
        ],
    )?;
    let second = if metrics.epochs.iter().any(|e| e.val_top1.is_some()) {
        let p = dir.join("top1.svg");
        line_plot(
            &p,
            "Validation top-1 accuracy",
            "top-1 (%)",
            &[("val top-1", ep(&|e| e.val_top1))],
        )?;
        p
    } else {
        let p = dir.join("bpp.svg");
        line_plot(
            &p,
            "Validation rate",
            "bits per pixel",
            &[("val bpp", ep(&|e| Some(e.mean_bpp)))],
        )?;
        p
    };
    Ok(vec![loss, second])
}
