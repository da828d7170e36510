use std::fs;
use std::path::Path;

use anyhow::{anyhow, ensure, Context, Result};
use emotalk_core::data::channels::CHANNEL_NAMES;
use emotalk_core::data::io::read_blendshape_csv;
use emotalk_core::data::N_BLENDSHAPES;
use emotalk_core::training::read_log;
use plotters::prelude::*;

use crate::PlotArgs;

const SIZE: (u32, u32) = (800, 400);
const PALETTE: [RGBColor; 5] = [BLACK, RED, BLUE, GREEN, MAGENTA];

fn line_chart(path: &Path, title: &str, x_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    ensure!(x0 <= x1, "nothing to plot for {title}");
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    let err = |e| anyhow!("plotting {}: {e:?}", path.display());
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(err)?;
    chart.configure_mesh().x_desc(x_label).draw().map_err(err)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.iter().copied(), color))
            .map_err(err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(err)?;
    }
    root.present().map_err(err)?;
    Ok(())
}

fn plot_log(input: &Path, out: &Path) -> Result<Vec<String>> {
    let log = read_log(input)?;
    ensure!(!log.is_empty(), "{} has no records", input.display());
    let pick = |f: fn(&emotalk_core::losses::LossReport) -> f64| -> Vec<(f64, f64)> {
        log.iter().map(|r| (r.step as f64, f(&r.loss))).collect()
    };
    let series = [
        ("total", pick(|l| l.total)),
        ("cross", pick(|l| l.cross)),
        ("self", pick(|l| l.self_rec)),
        ("velocity", pick(|l| l.velocity)),
        ("classification", pick(|l| l.classification)),
    ];
    line_chart(&out.join("loss.svg"), "training loss", "step", &series)?;
    line_chart(&out.join("loss_total.svg"), "total loss", "step", &series[..1])?;
    Ok(vec!["loss.svg".into(), "loss_total.svg".into()])
}

fn plot_csv(input: &Path, out: &Path, channels: &[usize]) -> Result<Vec<String>> {
    let seq = read_blendshape_csv(input)?;
    let fps = seq.fps() as f64;
    let all: Vec<usize> = (0..N_BLENDSHAPES).collect();
    let channels = if channels.is_empty() { &all[..] } else { channels };
    let mut written = Vec::new();
    for &c in channels {
        ensure!(c < N_BLENDSHAPES, "channel {c} out of range (0..{N_BLENDSHAPES})");
        let name = format!("channel_{c:02}_{}.svg", CHANNEL_NAMES[c]);
        let pts = seq
            .coeffs()
            .column(c)
            .iter()
            .enumerate()
            .map(|(t, &v)| (t as f64 / fps, v))
            .collect();
        line_chart(
            &out.join(&name),
            CHANNEL_NAMES[c],
            "time (s)",
            &[(CHANNEL_NAMES[c], pts)],
        )?;
        written.push(name);
    }
    Ok(written)
}

pub fn plot(a: PlotArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let is_log = a.input.extension().is_some_and(|e| e == "jsonl");
    let written = if is_log {
        plot_log(&a.input, &a.out)?
    } else {
        plot_csv(&a.input, &a.out, &a.channels)?
    };
    for name in &written {
        let len = fs::metadata(a.out.join(name))?.len();
        ensure!(len > 0, "{name} is empty");
    }
    println!("wrote {} plot(s) to {}", written.len(), a.out.display());
    Ok(())
}
