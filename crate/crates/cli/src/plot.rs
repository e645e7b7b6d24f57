//! Loss-curve image drawn straight from the CSV.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use image::{Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;
use structlight::training::moving_average;

const W: u32 = 900;
const H: u32 = 500;
const MARGIN: f32 = 40.0;

/// Colors per CSV column after `step`: L_a, L_s, L_g, L_d, L_m, total.
const COLORS: [[u8; 3]; 6] = [
    [214, 39, 40],
    [44, 160, 44],
    [31, 119, 180],
    [255, 127, 14],
    [148, 103, 189],
    [0, 0, 0],
];

fn read_columns(csv: &Path) -> anyhow::Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
    let mut steps = Vec::new();
    let mut cols = vec![Vec::new(); COLORS.len()];
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("bad CSV row '{line}'"))?;
        if vals.len() != cols.len() + 1 {
            return Err(anyhow!("CSV row has {} fields", vals.len()));
        }
        steps.push(vals[0]);
        for (c, v) in cols.iter_mut().zip(&vals[1..]) {
            c.push(*v);
        }
    }
    Ok((steps, cols))
}

/// Every loss on a log axis against the step, plus a 50-step moving average
/// of the total in grey. Columns that are never positive are skipped.
pub fn loss_curve(csv: &Path, png: &Path) -> anyhow::Result<()> {
    let (steps, cols) = read_columns(csv)?;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let positive: Vec<f64> = cols.iter().flatten().copied().filter(|v| *v > 0.0 && v.is_finite()).collect();
    if steps.len() >= 2 && !positive.is_empty() {
        let lo = positive.iter().copied().fold(f64::INFINITY, f64::min).log10().floor();
        let hi = positive.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10().ceil().max(lo + 1.0);
        let (s0, s1) = (steps[0], *steps.last().expect("non-empty"));
        let span = (s1 - s0).max(1.0);
        let px = |s: f64| MARGIN + ((s - s0) / span) as f32 * (W as f32 - 2.0 * MARGIN);
        let py = |v: f64| H as f32 - MARGIN - ((v.log10() - lo) / (hi - lo)) as f32 * (H as f32 - 2.0 * MARGIN);
        // one faint line per decade
        for d in lo as i32..=hi as i32 {
            let y = py(10f64.powi(d));
            draw_line_segment_mut(&mut img, (MARGIN, y), (W as f32 - MARGIN, y), Rgb([225, 225, 225]));
        }
        draw_line_segment_mut(&mut img, (MARGIN, MARGIN), (MARGIN, H as f32 - MARGIN), Rgb([0, 0, 0]));
        let mut series: Vec<(Vec<f64>, [u8; 3])> = cols.iter().cloned().zip(COLORS).collect();
        series.insert(0, (moving_average(&cols[5], 50), [170, 170, 170]));
        for (vals, color) in series {
            for i in 1..vals.len() {
                let (a, b) = (vals[i - 1], vals[i]);
                if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
                    draw_line_segment_mut(&mut img, (px(steps[i - 1]), py(a)), (px(steps[i]), py(b)), Rgb(color));
                }
            }
        }
    }
    img.save(png).with_context(|| format!("writing {}", png.display()))?;
    Ok(())
}
