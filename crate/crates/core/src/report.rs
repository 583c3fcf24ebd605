//! Tabular summaries, line plots and perturbation panels from trial records.
//!
//! Plots are hand-written SVG with fixed-precision coordinates, so the same
//! records always render to the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{summarize, CellKey, CellSummary, GoalKind, TrialRecord};
use crate::tensor::Image;

/// Bumped whenever plot output changes for identical input.
pub const RENDERER_VERSION: u32 = 1;

/// Gain applied to perturbations in panels.
pub const PANEL_AMPLIFICATION: f64 = 5.0;

const PANEL_SCALE: u32 = 4;
const PANEL_GAP: u32 = 4;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Groups records by cell in order of first appearance and summarises each.
/// Cells without a completed trial are skipped.
pub fn summaries_from_records(records: &[TrialRecord]) -> Vec<CellSummary> {
    let mut order: Vec<(String, CellKey)> = Vec::new();
    let mut groups: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    for r in records {
        let cell = r.cell();
        let id = cell.id();
        if !groups.contains_key(&id) {
            order.push((id.clone(), cell));
        }
        groups.entry(id).or_default().push(r.clone());
    }
    order
        .into_iter()
        .filter_map(|(id, cell)| summarize(&groups[&id]).ok().map(|summary| CellSummary { cell, summary }))
        .collect()
}

pub fn summaries_csv(summaries: &[CellSummary]) -> String {
    let mut out = String::from(
        "defense,sigma,attack,goal,mask,epsilon,trials,failed,asr,asr_untargeted,asr_strict,dos,\
         n_source,n_target,n_other,n_abstain,spoofed,mean_spoofing_radius,mean_source_radius,mean_l2,mean_linf,mean_tv\n",
    );
    for s in summaries {
        let (c, m) = (&s.cell, &s.summary);
        let radius = m.mean_spoofing_radius.map(|r| format!("{r:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            c.defense,
            c.sigma,
            c.attack,
            c.goal,
            c.mask,
            c.epsilon,
            m.trials,
            m.failed,
            m.asr,
            m.asr_untargeted,
            m.asr_strict,
            m.dos,
            m.counts.source,
            m.counts.target,
            m.counts.other,
            m.counts.abstain,
            m.spoofed,
            radius,
            m.mean_source_radius,
            m.mean_l2,
            m.mean_linf,
            m.mean_tv
        )
        .expect("write to string");
    }
    out
}

/// Which quantity a plot shows against ε.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Asr,
    /// Mean spoofing radius, with the mean source radius as a dashed line.
    Radius,
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// One panel of a figure family: all attacks and masks for one defense,
/// σ and goal.
pub fn plot_svg(summaries: &[CellSummary], kind: PlotKind, title: &str) -> String {
    let mut series: Vec<Series> = Vec::new();
    let mut source_radius = Vec::new();
    for s in summaries {
        let label = format!("{} ({})", s.cell.attack, s.cell.mask);
        let y = match kind {
            PlotKind::Asr => Some(s.summary.asr),
            PlotKind::Radius => s.summary.mean_spoofing_radius,
        };
        source_radius.push(s.summary.mean_source_radius);
        let idx = match series.iter().position(|x| x.label == label) {
            Some(i) => i,
            None => {
                series.push(Series { label, points: Vec::new() });
                series.len() - 1
            }
        };
        if let Some(y) = y {
            series[idx].points.push((s.cell.epsilon, y));
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let mut eps: Vec<f64> = summaries.iter().map(|s| s.cell.epsilon).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let source = (!source_radius.is_empty()).then(|| source_radius.iter().sum::<f64>() / source_radius.len() as f64);

    let (w, h) = (520.0, 340.0);
    let (left, right, top, bottom) = (60.0, 170.0, 36.0, 46.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let x_lo = eps.first().copied().unwrap_or(0.0);
    let x_hi = eps.last().copied().unwrap_or(1.0);
    let y_hi = match kind {
        PlotKind::Asr => 1.0,
        PlotKind::Radius => {
            let m = series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.1))
                .chain(source)
                .fold(0.0f64, f64::max);
            if m > 0.0 {
                (m * 1.1 * 10.0).ceil() / 10.0
            } else {
                1.0
            }
        }
    };
    let px = |x: f64| if x_hi > x_lo { left + (x - x_lo) / (x_hi - x_lo) * pw } else { left + pw / 2.0 };
    let py = |y: f64| top + ph - y / y_hi * ph;

    let mut svg = String::new();
    let _ = writeln!(svg, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">");
    let _ = writeln!(svg, "<!-- certspoof renderer {RENDERER_VERSION} -->");
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>", fmt2(left + pw / 2.0), escape(title));
    let _ = writeln!(
        svg,
        "<path d=\"M{l} {t} L{l} {b} L{r} {b}\" stroke=\"black\" fill=\"none\"/>",
        l = fmt2(left),
        t = fmt2(top),
        b = fmt2(top + ph),
        r = fmt2(left + pw)
    );
    for e in &eps {
        let x = fmt2(px(*e));
        let _ = writeln!(svg, "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>", fmt2(top + ph), fmt2(top + ph + 4.0));
        let _ = writeln!(svg, "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{e}</text>", fmt2(top + ph + 17.0));
    }
    for i in 0..=4 {
        let v = y_hi * i as f64 / 4.0;
        let y = fmt2(py(v));
        let _ = writeln!(svg, "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#dddddd\"/>", fmt2(left), fmt2(left + pw));
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\" dominant-baseline=\"middle\">{}</text>", fmt2(left - 6.0), fmt2(v));
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">epsilon</text>", fmt2(left + pw / 2.0), fmt2(h - 8.0));
    let y_label = match kind {
        PlotKind::Asr => "attack success rate",
        PlotKind::Radius => "certified radius",
    };
    let _ = writeln!(svg, "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>", fmt2(top + ph / 2.0), fmt2(top + ph / 2.0));

    let mut legend = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !s.points.is_empty() {
            let d: Vec<String> = s.points.iter().map(|(x, y)| format!("{},{}", fmt2(px(*x)), fmt2(py(*y)))).collect();
            let _ = writeln!(svg, "<polyline points=\"{}\" stroke=\"{color}\" stroke-width=\"2\" fill=\"none\"/>", d.join(" "));
            for (x, y) in &s.points {
                let _ = writeln!(svg, "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>", fmt2(px(*x)), fmt2(py(*y)));
            }
        }
        legend.push((s.label.clone(), color, false));
    }
    if let (PlotKind::Radius, Some(r)) = (kind, source) {
        let y = fmt2(py(r));
        let _ = writeln!(svg, "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"black\" stroke-dasharray=\"6 4\"/>", fmt2(left), fmt2(left + pw));
        legend.push(("source radius".to_string(), "black", true));
    }
    for (i, (label, color, dashed)) in legend.iter().enumerate() {
        let y = top + 8.0 + 18.0 * i as f64;
        let x = left + pw + 12.0;
        let dash = if *dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let _ = writeln!(svg, "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>", fmt2(x), fmt2(y), fmt2(x + 20.0), fmt2(y));
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" dominant-baseline=\"middle\">{}</text>", fmt2(x + 26.0), fmt2(y), escape(label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn to_rgb(x: &Image, y: u32, xx: u32) -> Rgb<u8> {
    let px = x.pixel(y as usize, xx as usize);
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match px.len() {
        1 => Rgb([q(px[0]); 3]),
        _ => Rgb([q(px[0]), q(px[1]), q(px[2])]),
    }
}

/// Source, adversarial and amplified perturbation side by side, each
/// upscaled ×4. The perturbation panel shows `0.5 + 5·δ`.
pub fn perturbation_panel(x: &Image, adversarial: &Image) -> Result<RgbImage> {
    adversarial.ensure_shape(x.shape())?;
    let delta = adversarial.sub(x);
    let shown = Image::from_fn(x.shape(), |y, xx, c| 0.5 + PANEL_AMPLIFICATION * delta.get(y, xx, c));
    let (h, w) = (x.height() as u32, x.width() as u32);
    let tile_w = w * PANEL_SCALE;
    let mut out = RgbImage::from_pixel(3 * tile_w + 2 * PANEL_GAP, h * PANEL_SCALE, Rgb([255, 255, 255]));
    for (t, img) in [x, adversarial, &shown].into_iter().enumerate() {
        let x0 = t as u32 * (tile_w + PANEL_GAP);
        for oy in 0..h * PANEL_SCALE {
            for ox in 0..tile_w {
                out.put_pixel(x0 + ox, oy, to_rgb(img, oy / PANEL_SCALE, ox / PANEL_SCALE));
            }
        }
    }
    Ok(out)
}

pub fn panel_caption() -> String {
    format!("source | adversarial | perturbation (amplified x{PANEL_AMPLIFICATION}, mid-gray = no change)")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub summary_csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub panels: Vec<PathBuf>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `summary.csv`, ASR and radius plots for every (defense, σ, goal)
/// group and, when the dataset is given, up to `max_panels` panels of
/// spoofed trials at their cell's largest budget.
pub fn render_report(records: &[TrialRecord], dataset: Option<&Dataset>, out_dir: &Path, max_panels: usize) -> Result<ReportFiles> {
    let summaries = summaries_from_records(records);
    let mut files = ReportFiles {
        summary_csv: out_dir.join("summary.csv"),
        ..Default::default()
    };
    write(&files.summary_csv, summaries_csv(&summaries).as_bytes())?;

    let mut groups: Vec<((String, String, GoalKind), Vec<CellSummary>)> = Vec::new();
    for s in &summaries {
        let key = (s.cell.defense.to_string(), s.cell.sigma.to_string(), s.cell.goal);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(s.clone()),
            None => groups.push((key, vec![s.clone()])),
        }
    }
    for ((defense, sigma, goal), cells) in &groups {
        for (kind, name) in [(PlotKind::Asr, "asr"), (PlotKind::Radius, "radius")] {
            let title = format!("{defense}, sigma = {sigma}, {goal}");
            let path = out_dir.join("plots").join(format!("{name}_{defense}_sigma{sigma}_{goal}.svg"));
            write(&path, plot_svg(cells, kind, &title).as_bytes())?;
            files.plots.push(path);
        }
    }

    if let Some(data) = dataset {
        let max_eps = records.iter().map(|r| r.epsilon).fold(f64::NEG_INFINITY, f64::max);
        let mut captions = String::new();
        for r in records
            .iter()
            .filter(|r| r.epsilon == max_eps && r.is_completed())
            .filter(|r| matches!(r.outcome(), Some(crate::evaluation::Outcome::Target | crate::evaluation::Outcome::Other)))
            .take(max_panels)
        {
            let Some(adv) = r.adversarial_image()? else { continue };
            if r.image_id >= data.len() {
                return Err(Error::Domain(format!("record image {} outside the dataset", r.image_id)));
            }
            let panel = perturbation_panel(data.image(r.image_id), &adv)?;
            let name = format!(
                "panel_{}_{}_{}_{}_img{}.png",
                r.defense,
                r.attack,
                r.cell().goal,
                r.epsilon,
                r.image_id
            );
            let path = out_dir.join("panels").join(&name);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            panel.save(&path)?;
            let post = r.post.expect("completed");
            let _ = writeln!(
                captions,
                "{name}: {}. label {} (radius {:.3}) -> {} (radius {:.3})",
                panel_caption(),
                r.source_label,
                r.source.radius,
                post.decision,
                post.radius
            );
            files.panels.push(path);
        }
        if !files.panels.is_empty() {
            write(&out_dir.join("panels").join("captions.txt"), captions.as_bytes())?;
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn panel_layout_and_amplification() {
        let x = Image::filled(Shape::new(2, 3, 1), 0.4);
        let mut adv = x.clone();
        adv.set(0, 0, 0, 0.5);
        let p = perturbation_panel(&x, &adv).unwrap();
        assert_eq!(p.dimensions(), (3 * 12 + 2 * PANEL_GAP, 8));
        let third = 2 * (12 + PANEL_GAP);
        // 0.5 + 5·0.1 = 1.0 at the changed pixel, mid-gray elsewhere
        assert_eq!(p.get_pixel(third, 0), &Rgb([255; 3]));
        assert_eq!(p.get_pixel(third + 11, 7), &Rgb([128; 3]));
        assert_eq!(p.get_pixel(12, 0), &Rgb([255; 3]));
    }

    #[test]
    fn empty_plot_is_still_valid_svg() {
        let svg = plot_svg(&[], PlotKind::Radius, "a < b");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt; b"));
    }
}
