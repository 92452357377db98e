use anyhow::{bail, Context, Result};
use plotters::prelude::*;
use std::fs;
use std::path::Path;
use vsda::trainer::{read_metrics, MetricRecord};

type Series = (&'static str, Vec<(f64, f64)>);

fn chart(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        bail!("nothing to plot for {title}");
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut c = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 - pad)..(y1 + pad))?;
    c.configure_mesh().x_desc("step").draw()?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        c.draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    c.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
    root.present()?;
    Ok(())
}

/// Averages consecutive points in windows of `w` to make noisy per-step
/// losses readable.
fn smooth(s: Vec<(f64, f64)>, w: usize) -> Vec<(f64, f64)> {
    s.chunks(w.max(1))
        .map(|c| {
            let n = c.len() as f64;
            (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect()
}

pub fn plot(metrics: &Path, out: &Path) -> Result<()> {
    let records = read_metrics(metrics)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut ssl = Vec::new();
    let mut sa = Vec::new();
    let mut sta = Vec::new();
    let mut wd = Vec::new();
    let mut itcr = Vec::new();
    let mut miou = Vec::new();
    let mut tc = Vec::new();
    for r in &records {
        match r {
            MetricRecord::Train { step, losses, .. } => {
                let x = *step as f64;
                ssl.push((x, losses.ssl));
                sa.extend(losses.sa.map(|v| (x, v)));
                sta.extend(losses.sta.map(|v| (x, v)));
                wd.extend(losses.wd.map(|v| (x, v)));
                itcr.extend(losses.itcr.map(|v| (x, v)));
            }
            MetricRecord::Eval {
                step,
                miou_target,
                temporal_consistency,
                ..
            } => {
                miou.push((*step as f64, *miou_target));
                tc.push((*step as f64, *temporal_consistency));
            }
        }
    }
    let w = (ssl.len() / 200).max(1);
    let losses: Vec<Series> = [("ssl", ssl), ("sa", sa), ("sta", sta), ("wd", wd), ("itcr", itcr)]
        .into_iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(n, s)| (n, smooth(s, w)))
        .collect();
    if !losses.is_empty() {
        chart(&out.join("losses.svg"), "training losses", &losses)?;
    }
    chart(
        &out.join("eval.svg"),
        "target evaluation",
        &[("mIoU", miou), ("temporal consistency", tc)],
    )?;
    println!("wrote plots to {}", out.display());
    Ok(())
}
