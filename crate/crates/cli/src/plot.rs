use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mdico::losses::{LossBundle, LossTerm};
use mdico::model::read_loss_trace;
use plotters::prelude::*;

use crate::config::usage;

const COLORS: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
];

/// `epoch,term,value`, four rows per epoch.
pub fn tidy_rows(epochs: &[(usize, LossBundle)]) -> Vec<(usize, &'static str, f64)> {
    epochs
        .iter()
        .flat_map(|(epoch, l)| LossTerm::ALL.iter().map(move |&t| (*epoch, t.name(), l.term(t))))
        .collect()
}

fn render(epochs: &[(usize, LossBundle)], path: &Path) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let max_epoch = epochs.iter().map(|e| e.0).max().unwrap_or(0).max(1);
    let min_epoch = epochs.iter().map(|e| e.0).min().unwrap_or(0);
    let top = epochs
        .iter()
        .flat_map(|e| e.1.terms())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption("Loss terms per epoch", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(min_epoch as f64..max_epoch as f64, 0.0..top)?;
    chart.configure_mesh().x_desc("epoch").y_desc("training loss").draw()?;
    for (i, term) in LossTerm::ALL.iter().enumerate() {
        let color = COLORS[i];
        chart
            .draw_series(LineSeries::new(
                epochs.iter().map(|e| (e.0 as f64, e.1.term(*term))),
                color.stroke_width(2),
            ))?
            .label(term.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

/// Writes `losses.svg` and `losses_tidy.csv` into `out`.
pub fn plot_losses(trace: &Path, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let epochs = read_loss_trace(trace).map_err(|e| usage(format!("malformed loss trace: {e}")))?;
    if epochs.is_empty() {
        return Err(usage(format!("{}: trace has no epochs", trace.display())));
    }
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let mut snapshot = toml::Table::new();
    snapshot.insert("trace".into(), toml::Value::String(trace.display().to_string()));
    fs::write(out.join(crate::config::SNAPSHOT_FILE), toml::to_string(&snapshot)?)?;
    let tidy = out.join("losses_tidy.csv");
    let mut text = String::from("epoch,term,value\n");
    for (epoch, term, value) in tidy_rows(&epochs) {
        text.push_str(&format!("{epoch},{term},{value}\n"));
    }
    fs::write(&tidy, text).with_context(|| format!("write {}", tidy.display()))?;
    let svg = out.join("losses.svg");
    render(&epochs, &svg).with_context(|| format!("render {}", svg.display()))?;
    Ok(vec![svg, tidy])
}
