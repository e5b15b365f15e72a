//! Minimal static SVG charts.

use std::fmt::Write;

use anyhow::{bail, Result};

use petduet::training::{Phase, RunLedger};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    )
}

/// Total loss per step, one polyline per phase.
pub fn loss_curve(ledger: &RunLedger) -> String {
    let e = &ledger.entries;
    let max_step = e.iter().map(|x| x.step).max().unwrap_or(0).max(1) as f64;
    let max_loss = e.iter().map(|x| x.total).fold(0.0f64, f64::max).max(1e-9);
    let sx = |s: usize| PAD + (W - 2.0 * PAD) * s as f64 / max_step;
    let sy = |l: f64| H - PAD - (H - 2.0 * PAD) * l / max_loss;
    let mut svg = header("training loss");
    for (phase, color) in [(Phase::Visual, "#1f77b4"), (Phase::Text, "#d62728")] {
        let pts: Vec<String> = e
            .iter()
            .filter(|x| x.phase == phase)
            .map(|x| format!("{:.1},{:.1}", sx(x.step), sy(x.total)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>", W / 2.0, H - 12.0);
    let _ = writeln!(svg, "<text x=\"{PAD}\" y=\"{}\" text-anchor=\"end\">{max_loss:.2}</text>", PAD + 4.0);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" fill=\"#1f77b4\">visual</text>", W - PAD - 80.0, PAD);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" fill=\"#d62728\">text</text>", W - PAD - 80.0, PAD + 16.0);
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationBar {
    pub label: String,
    pub visual_i: f64,
    pub visual_g: f64,
    pub text: f64,
}

/// Reads `ablation.csv`, averaging rows that share a label.
pub fn parse_ablation(text: &str) -> Result<Vec<AblationBar>> {
    let mut out: Vec<(AblationBar, usize)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("ablation line {} has {} fields", i + 1, f.len());
        }
        let num = |k: usize| -> Result<f64> { Ok(f[k].trim().parse()?) };
        let (vi, vg, t) = (num(3)?, num(4)?, num(5)?);
        match out.iter_mut().find(|(b, _)| b.label == f[1]) {
            Some((b, n)) => {
                b.visual_i += vi;
                b.visual_g += vg;
                b.text += t;
                *n += 1;
            }
            None => out.push((
                AblationBar {
                    label: f[1].to_string(),
                    visual_i: vi,
                    visual_g: vg,
                    text: t,
                },
                1,
            )),
        }
    }
    Ok(out
        .into_iter()
        .map(|(b, n)| AblationBar {
            visual_i: b.visual_i / n as f64,
            visual_g: b.visual_g / n as f64,
            text: b.text / n as f64,
            label: b.label,
        })
        .collect())
}

/// Grouped bars of the three protocols per variant.
pub fn ablation_bars(rows: &[AblationBar]) -> String {
    let mut svg = header("AP by variant");
    let group = (W - 2.0 * PAD) / rows.len().max(1) as f64;
    let bar = group / 4.0;
    let sy = |v: f64| (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    for (i, r) in rows.iter().enumerate() {
        let x0 = PAD + group * i as f64 + bar / 2.0;
        for (k, (v, color)) in [(r.visual_i, "#1f77b4"), (r.visual_g, "#ff7f0e"), (r.text, "#2ca02c")]
            .into_iter()
            .enumerate()
        {
            let h = sy(v);
            let _ = writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{color}\"/>",
                x0 + bar * k as f64,
                H - PAD - h,
                bar
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x0 + bar * 1.5,
            H - PAD + 16.0,
            r.label
        );
    }
    for (k, (name, color)) in [("Visual-I", "#1f77b4"), ("Visual-G", "#ff7f0e"), ("Text", "#2ca02c")]
        .into_iter()
        .enumerate()
    {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
            W - PAD - 70.0,
            PAD + 16.0 * k as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
