//! Minimal PNG charts: line plots and bar charts without text.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const MARGIN: u32 = 20;
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

fn canvas(width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, height - MARGIN, AXIS);
    }
    for y in MARGIN..=height - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn value_range<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series over a shared x axis of sample indices.
pub fn line_chart(path: &Path, series: &[&[f64]], width: u32, height: u32) -> Result<()> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::invalid("chart is smaller than its margins"));
    }
    let mut img = canvas(width, height);
    let (lo, hi) = value_range(series.iter().flat_map(|s| s.iter()));
    let len = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let (pw, ph) = ((width - 2 * MARGIN) as f64, (height - 2 * MARGIN) as f64);
    let px = |i: usize| MARGIN as i64 + (i as f64 * pw / (len.max(2) - 1) as f64).round() as i64;
    let py = |v: f64| (height - MARGIN) as i64 - ((v - lo) / (hi - lo) * ph).round() as i64;
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        for i in 1..s.len() {
            line(&mut img, (px(i - 1), py(s[i - 1])), (px(i), py(s[i])), color);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Groups of bars, one colour per position within a group; bars start at 0.
pub fn bar_chart(path: &Path, groups: &[Vec<f64>], width: u32, height: u32) -> Result<()> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::invalid("chart is smaller than its margins"));
    }
    let mut img = canvas(width, height);
    let top = groups
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, &v| a.max(v));
    let top = if top > 0.0 { top } else { 1.0 };
    let slots: usize = groups.iter().map(|g| g.len() + 1).sum::<usize>().max(1);
    let slot_w = (width - 2 * MARGIN) as f64 / slots as f64;
    let ph = (height - 2 * MARGIN) as f64;
    let mut at = 0usize;
    for g in groups {
        for (k, &v) in g.iter().enumerate() {
            let x0 = MARGIN as f64 + (at as f64 + 0.5) * slot_w;
            let bar = if v.is_finite() { (v.max(0.0) / top * ph).round() as u32 } else { 0 };
            let color = Rgb(PALETTE[k % PALETTE.len()]);
            for x in x0 as u32..(x0 + slot_w * 0.9) as u32 {
                for y in (height - MARGIN - bar)..(height - MARGIN) {
                    img.put_pixel(x, y, color);
                }
            }
            at += 1;
        }
        at += 1;
    }
    img.save(path)?;
    Ok(())
}
